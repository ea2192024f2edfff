#pragma once

// The HyperTransformer: shared-weight PAN feature extractor, HSI feature
// extractor, multi-head feature soft-attention with cross-correlation
// embedding, textural-spectral fusion, and a three-scale residual backbone.
//
// Scale indexing is the same everywhere: index 0 is x4 (full HR size),
// index 1 is x2 (HR/2) and index 2 is x1 (HR/4, the LR-HSI size).

#include <array>
#include <cstdint>
#include <string>

#include "hyperpan/nn.hpp"
#include "json.hpp"

namespace hyperpan {

inline constexpr std::size_t kScales = 3;
inline constexpr std::array<std::size_t, kScales> kScaleTags{4, 2, 1};

using Pyramid = std::array<Tensor, kScales>;

/// How mean(.) in the cross-correlation is taken.
enum class MeanMode { Global, PerRow };

/// Which axis of an [N, f_q, f_k] correlation the softmax normalizes.
/// Queries is dim 1 (each key column sums to 1); Keys is dim 2 (each query row sums to 1).
enum class SoftmaxAxis { Queries, Keys };

enum class Upsampler { TransposedConv, BicubicConv };

struct ModelConfig {
    std::size_t bands = 8;
    std::size_t hr_height = 64;
    std::size_t hr_width = 64;
    /// Feature channels at x4, x2, x1; shared by both extractors and the backbone.
    std::array<std::size_t, kScales> channels{8, 16, 32};
    std::size_t heads = 16;
    double beta = 0.25;
    /// Attention operates on non-overlapping window x window tiles of each
    /// feature map; maps no larger than the window are attended whole.
    std::size_t window = 16;
    MeanMode mean_mode = MeanMode::Global;
    SoftmaxAxis softmax_axis = SoftmaxAxis::Queries;
    /// Residual blocks at x4, x2, x1.
    std::array<std::size_t, kScales> res_blocks{2, 2, 2};
    Upsampler upsampler = Upsampler::TransposedConv;
    /// Texture injection at x4, x2, x1.
    std::array<bool, kScales> scales_enabled{true, true, true};
    /// T = V at every enabled scale (attention skipped).
    bool attention_bypass = false;

    std::size_t lr_height() const { return hr_height / 4; }
    std::size_t lr_width() const { return hr_width / 4; }
    std::size_t height_at(std::size_t s) const { return hr_height >> s; }
    std::size_t width_at(std::size_t s) const { return hr_width >> s; }
    /// Side of the attention tile at scale s.
    std::size_t window_at(std::size_t s) const;
    /// round(beta * window_at(s)^2).
    std::size_t reduced_length(std::size_t s) const;
    bool any_scale_enabled() const { return scales_enabled[0] || scales_enabled[1] || scales_enabled[2]; }

    /// Throws ContractError / DimensionError on an unusable configuration.
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// ---------------------------------------------------------------------------
// Attention primitives

/// q', k', v' of one attention call, each [tiles * heads, f, reduced].
struct DescriptorSet {
    Tensor q, k, v;
    std::size_t tiles = 1;
    std::size_t heads = 1;
};

/// [f, H, W] -> [tiles, f, window^2]; tiles are row-major over the map.
Tensor tile(const Tensor& x, std::size_t window);
/// Inverse of tile for a [tiles, f, window^2] tensor.
Tensor untile(const Tensor& t, std::size_t height, std::size_t width, std::size_t window);

/// Flattens each feature (per tile) and projects it through N linear layers
/// (stacked as one [N * reduced, window^2] layer per stream).
DescriptorSet build_descriptors(const Tensor& Q, const Tensor& K, const Tensor& V, const Linear& q_proj,
                                const Linear& k_proj, const Linear& v_proj, std::size_t heads, std::size_t window);

/// Mean-centred cross-correlation (q' - mean)(k' - mean)^T per head: [tiles * heads, f_q, f_k].
Tensor cross_correlation(const DescriptorSet& d, MeanMode mean_mode = MeanMode::Global);

/// Softmax-normalized cross_correlation.
Tensor fcce(const DescriptorSet& d, MeanMode mean_mode = MeanMode::Global,
            SoftmaxAxis axis = SoftmaxAxis::Queries);

/// t = C~ v', heads concatenated per feature and projected back to window^2,
/// then reassembled into an [f, height, width] texture map.
Tensor mhfsa(const Tensor& c_tilde, const DescriptorSet& d, const Linear& out_proj, std::size_t height,
             std::size_t width, std::size_t window);

/// BatchNorm(Conv3x3(Cat(T, F))).
Tensor tsff(const Tensor& T, const Tensor& F, const Conv2d& conv, const BatchNorm2d& bn, bool training);

// ---------------------------------------------------------------------------
// Network

/// VGG-like three-stage extractor; stages 2 and 3 open with a stride-2 conv.
struct FeatureExtractor {
    std::array<Conv2d, kScales> first;
    std::array<Conv2d, kScales> second;

    Pyramid operator()(const Tensor& x) const;
};

struct ResidualBlock {
    Conv2d a, b;
    Tensor operator()(const Tensor& x) const;
};

/// Transformer block at one scale: descriptor projections, output projection, fusion.
struct TextureBlock {
    Linear q_proj, k_proj, v_proj, out_proj;
    Conv2d fuse;
    BatchNorm2d norm;
};

struct Upsample {
    Upsampler kind = Upsampler::TransposedConv;
    ConvTranspose2d transposed;
    Conv2d conv;

    Tensor operator()(const Tensor& x) const;
};

struct ForwardResult {
    Tensor x;           // [C, H, W] prediction
    Tensor y_up;        // bicubic x4 of the LR cube (the global skip)
    Pyramid textures;   // T per scale; undefined where the scale is disabled
};

class HyperTransformer {
public:
    HyperTransformer(ModelConfig config, std::uint64_t seed);
    // Layers share tensors with the store; a copy would alias every parameter.
    HyperTransformer(const HyperTransformer&) = delete;
    HyperTransformer& operator=(const HyperTransformer&) = delete;
    HyperTransformer(HyperTransformer&&) = default;
    HyperTransformer& operator=(HyperTransformer&&) = default;

    const ModelConfig& config() const { return config_; }
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }

    /// Q pyramid from the upsampled LR cube [C, H, W].
    Pyramid fe_hsi(const Tensor& y_up) const;
    /// K or V pyramid from a [1, H, W] PAN (or its down-up version); one shared instance.
    Pyramid fe_pan(const Tensor& pan) const;
    /// Texture map T at scale s from feature maps Q, K, V.
    Tensor transfer(std::size_t s, const Tensor& Q, const Tensor& K, const Tensor& V) const;

    /// y [C, H/4, W/4] and p [1, H, W] -> prediction. `training` selects BN batch statistics.
    ForwardResult forward(const Tensor& y, const Tensor& pan, bool training) const;

    FeatureExtractor& hsi_extractor() { return fe_hsi_; }
    FeatureExtractor& pan_extractor() { return fe_pan_; }
    TextureBlock& texture_block(std::size_t s) { return blocks_[s]; }

private:
    ModelConfig config_;
    ParameterStore store_;
    FeatureExtractor fe_hsi_, fe_pan_;
    Conv2d stem_;
    std::array<std::vector<ResidualBlock>, kScales> body_;
    std::array<TextureBlock, kScales> blocks_;
    std::array<Upsample, kScales - 1> up_;  // up_[0]: x1 -> x2, up_[1]: x2 -> x4
    Conv2d head_;
};

}  // namespace hyperpan
