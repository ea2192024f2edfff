#pragma once

// Training objectives: L1 reconstruction, perceptual distance between
// synthesized RGB renderings, texture-transfer distance in HSI feature
// space, and their weighted sum.

#include <cstdint>
#include <optional>
#include <vector>

#include "hyperpan/image_pipeline.hpp"
#include "hyperpan/model.hpp"

namespace hyperpan {

struct LossWeights {
    double rec = 1.0;
    double vgg_per = 0.1;
    double t_per = 0.05;

    /// Throws ContractError when a weight is negative or non-finite.
    void validate() const;
};

/// Frozen convolutional feature extractor over RGB input: a stack of 3x3
/// conv + ReLU layers whose parameters never require gradients.
class PerceptualNet {
public:
    static constexpr std::size_t kDefaultLayers = 5;
    static constexpr std::size_t kDefaultTap = 3;

    explicit PerceptualNet(std::uint64_t seed = 0x9e3779b97f4a7c15ULL, std::size_t tap = kDefaultTap);
    /// Wraps explicit weights (e.g. loaded from a parameter file); `layers`
    /// must chain 3 -> ... channels with 3x3 kernels.
    PerceptualNet(std::vector<Conv2d> layers, std::size_t tap);

    /// Activation of conv layer `tap` (1-based) for a [3, H, W] image.
    Tensor features(const Tensor& rgb) const;
    std::size_t tap() const { return tap_; }
    const std::vector<Conv2d>& layers() const { return layers_; }
    const ParameterStore& store() const { return store_; }

private:
    ParameterStore store_;
    std::vector<Conv2d> layers_;
    std::size_t tap_;
};

/// (1 / CHW) * ||x_ref - x||_1
Tensor loss_rec(const Tensor& x, const Tensor& x_ref);

/// (1 / C_i H_i W_i) * ||f_i(rgb(x_ref)) - f_i(rgb(x))||_2; the reference branch is constant.
Tensor loss_vgg_per(const Tensor& x, const Tensor& x_ref, const PerceptualNet& net, const RgbResponses& responses);

/// Sum over enabled scales of (1 / C_s H_s W_s) * ||FE_HSI(x)^s - T^s||_2 with T treated as constant.
Tensor loss_transfer_per(const Tensor& x, const Pyramid& textures, const HyperTransformer& model);

struct LossTerms {
    Tensor total;
    /// Component values; a term with zero weight is skipped and left empty.
    std::optional<double> rec, vgg_per, t_per;
};

LossTerms loss_overall(const Tensor& x, const Tensor& x_ref, const Pyramid& textures, const HyperTransformer& model,
                       const PerceptualNet& net, const RgbResponses& responses, const LossWeights& weights);

}  // namespace hyperpan
