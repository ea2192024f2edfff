#include "hyperpan/losses.hpp"

#include <cmath>

#include "hyperpan/errors.hpp"

namespace hyperpan {

void LossWeights::validate() const {
    for (double w : {rec, vgg_per, t_per}) {
        if (!std::isfinite(w) || w < 0.0) throw ContractError("loss weights must be finite and non-negative");
    }
}

namespace {

constexpr std::size_t kPerceptualWidths[PerceptualNet::kDefaultLayers] = {16, 16, 32, 32, 32};

void check_same_shape(const Tensor& x, const Tensor& x_ref, const char* what) {
    if (x.shape() != x_ref.shape()) {
        throw DimensionError(std::string(what) + ": prediction " + shape_str(x.shape()) + " vs reference " +
                             shape_str(x_ref.shape()));
    }
}

Tensor normalized_l2(const Tensor& a, const Tensor& b) {
    return mul_scalar(l2_norm(a - b), 1.0 / static_cast<double>(a.numel()));
}

}  // namespace

PerceptualNet::PerceptualNet(std::uint64_t seed, std::size_t tap) : store_(seed, /*trainable=*/false), tap_(tap) {
    std::size_t prev = 3;
    for (std::size_t i = 0; i < kDefaultLayers; ++i) {
        layers_.push_back(store_.conv("perceptual.conv" + std::to_string(i + 1), prev, kPerceptualWidths[i], 3, 1, 1));
        prev = kPerceptualWidths[i];
    }
    if (tap_ == 0 || tap_ > layers_.size()) throw ContractError("PerceptualNet: tap layer out of range");
}

PerceptualNet::PerceptualNet(std::vector<Conv2d> layers, std::size_t tap)
    : store_(0, false), layers_(std::move(layers)), tap_(tap) {
    if (tap_ == 0 || tap_ > layers_.size()) throw ContractError("PerceptualNet: tap layer out of range");
    std::size_t prev = 3;
    for (auto& l : layers_) {
        if (l.weight.rank() != 4 || l.weight.dim(1) != prev || l.weight.dim(2) != 3) {
            throw ContractError("PerceptualNet: layer weight " + shape_str(l.weight.shape()) + " does not chain");
        }
        l.weight.set_requires_grad(false);
        l.bias.set_requires_grad(false);
        l.padding = 1;
        prev = l.weight.dim(0);
    }
}

Tensor PerceptualNet::features(const Tensor& rgb) const {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw DimensionError("PerceptualNet: expected [3,H,W], got " + shape_str(rgb.shape()));
    Tensor h = rgb;
    for (std::size_t i = 0; i < tap_; ++i) h = relu(layers_[i](h));
    return h;
}

Tensor loss_rec(const Tensor& x, const Tensor& x_ref) {
    check_same_shape(x, x_ref, "loss_rec");
    return mul_scalar(l1_norm(x - x_ref), 1.0 / static_cast<double>(x.numel()));
}

Tensor loss_vgg_per(const Tensor& x, const Tensor& x_ref, const PerceptualNet& net, const RgbResponses& responses) {
    check_same_shape(x, x_ref, "loss_vgg_per");
    Tensor ref_features;
    {
        NoGradGuard no_grad;
        ref_features = net.features(synthesize_rgb(x_ref.detach(), responses));
    }
    return normalized_l2(net.features(synthesize_rgb(x, responses)), ref_features);
}

Tensor loss_transfer_per(const Tensor& x, const Pyramid& textures, const HyperTransformer& model) {
    const auto& enabled = model.config().scales_enabled;
    if (!model.config().any_scale_enabled()) return Tensor::scalar(0.0);
    for (std::size_t s = 0; s < kScales; ++s) {
        if (enabled[s] && !textures[s].defined()) {
            throw ContractError("loss_transfer_per: no texture captured at x" + std::to_string(kScaleTags[s]));
        }
    }
    Pyramid fx = model.fe_hsi(x);
    Tensor total;
    for (std::size_t s = 0; s < kScales; ++s) {
        if (!enabled[s]) continue;
        if (fx[s].shape() != textures[s].shape()) {
            throw DimensionError("loss_transfer_per: features " + shape_str(fx[s].shape()) + " vs texture " +
                                 shape_str(textures[s].shape()) + " at x" + std::to_string(kScaleTags[s]));
        }
        Tensor term = normalized_l2(fx[s], textures[s].detach());
        total = total.defined() ? total + term : term;
    }
    return total;
}

LossTerms loss_overall(const Tensor& x, const Tensor& x_ref, const Pyramid& textures, const HyperTransformer& model,
                       const PerceptualNet& net, const RgbResponses& responses, const LossWeights& weights) {
    weights.validate();
    check_same_shape(x, x_ref, "loss_overall");
    LossTerms out;
    auto accumulate = [&](double w, const Tensor& term, std::optional<double>& slot) {
        slot = term.item();
        Tensor scaled = mul_scalar(term, w);
        out.total = out.total.defined() ? out.total + scaled : scaled;
    };
    if (weights.rec > 0.0) accumulate(weights.rec, loss_rec(x, x_ref), out.rec);
    if (weights.vgg_per > 0.0) accumulate(weights.vgg_per, loss_vgg_per(x, x_ref, net, responses), out.vgg_per);
    if (weights.t_per > 0.0) accumulate(weights.t_per, loss_transfer_per(x, textures, model), out.t_per);
    if (!out.total.defined()) out.total = mul_scalar(sum(x), 0.0);
    return out;
}

}  // namespace hyperpan
