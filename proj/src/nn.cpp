#include "hyperpan/nn.hpp"

#include <cmath>

#include "hyperpan/errors.hpp"

namespace hyperpan {

double uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

ParameterStore::ParameterStore(std::uint64_t seed, bool trainable) : rng_(seed), trainable_(trainable) {}

Tensor ParameterStore::make(const std::string& name, Shape shape, double bound) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = uniform(rng_, -bound, bound);
    Tensor t(std::move(shape), std::move(data), trainable_);
    params_.push_back({name, t});
    return t;
}

Tensor ParameterStore::make_constant(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value, trainable_);
    params_.push_back({name, t});
    return t;
}

Linear ParameterStore::linear(const std::string& name, std::size_t in, std::size_t out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    Linear l;
    l.weight = make(name + ".weight", {out, in}, bound);
    l.bias = make_constant(name + ".bias", {out}, 0.0);
    return l;
}

Conv2d ParameterStore::conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                            std::size_t stride, std::size_t padding, double init_scale) {
    const double bound = init_scale * std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
    Conv2d c;
    c.weight = make(name + ".weight", {out, in, kernel, kernel}, bound);
    c.bias = make_constant(name + ".bias", {out}, 0.0);
    c.stride = stride;
    c.padding = padding;
    return c;
}

ConvTranspose2d ParameterStore::conv_transpose(const std::string& name, std::size_t in, std::size_t out,
                                               std::size_t kernel, std::size_t stride, std::size_t padding) {
    // Each output pixel of a stride-s transposed conv sees in * (k/s)^2 taps.
    const double taps = static_cast<double>(in * kernel * kernel) / static_cast<double>(stride * stride);
    const double bound = std::sqrt(6.0 / std::max(1.0, taps));
    ConvTranspose2d c;
    c.weight = make(name + ".weight", {in, out, kernel, kernel}, bound);
    c.bias = make_constant(name + ".bias", {out}, 0.0);
    c.stride = stride;
    c.padding = padding;
    return c;
}

BatchNorm2d ParameterStore::batch_norm(const std::string& name, std::size_t channels) {
    BatchNorm2d bn;
    bn.gamma = make_constant(name + ".gamma", {channels}, 1.0);
    bn.beta = make_constant(name + ".beta", {channels}, 0.0);
    bn.stats = std::make_shared<RunningStats>(RunningStats::init(channels));
    buffers_.push_back({name, bn.stats});
    return bn;
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

const Tensor& ParameterStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.value;
    throw ContractError("no parameter named '" + name + "'");
}

}  // namespace hyperpan
