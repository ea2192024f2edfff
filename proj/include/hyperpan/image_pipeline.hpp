#pragma once

// Data preparation: simulated sensor degradation (Wald's protocol), bicubic
// resampling, RGB synthesis through Gaussian spectral responses, and a
// deterministic synthetic-scene generator.

#include <array>
#include <cstdint>
#include <vector>

#include "hyperpan/tensor.hpp"

namespace hyperpan {

/// A hyperspectral cube [C,H,W]. Reference and input cubes live in [0,1].
struct HsiCube {
    Tensor data;
    std::vector<std::int32_t> wavelength_ids;

    HsiCube() = default;
    explicit HsiCube(Tensor t, std::vector<std::int32_t> ids = {});

    std::size_t bands() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }
};

/// Single-band high-resolution panchromatic image [1,H,W].
struct PanImage {
    Tensor data;

    PanImage() = default;
    explicit PanImage(Tensor t);

    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }
};

/// Gaussian sensitivity over the band axis, in band-index units.
struct SpectralResponse {
    int center_band = 0;
    double sigma_bands = 1.0;

    /// Normalized non-negative weights over `bands` bands. sigma <= 0 is a delta at the center.
    std::vector<double> weights(std::size_t bands) const;
};

using RgbResponses = std::array<SpectralResponse, 3>;  // blue, green, red

/// Blue/green/red centers at bands 10, 30, 60.
RgbResponses pavia_responses(double sigma_bands = 5.0);

/// Pavia triplet when it fits; otherwise the same relative positions scaled to `bands`.
RgbResponses default_responses(std::size_t bands);

/// Rational resampling factor (output side = input side * num / den).
struct ScaleFactor {
    std::size_t num = 1;
    std::size_t den = 1;

    static constexpr ScaleFactor up(std::size_t f) { return {f, 1}; }
    static constexpr ScaleFactor down(std::size_t f) { return {1, f}; }
};

// ---------------------------------------------------------------------------

/// Normalized separable 8-tap Gaussian (returned as the 1-D factor).
std::vector<double> gaussian_taps(std::size_t size, double sigma);

struct DegradeOptions {
    std::size_t scale = 4;
    double sigma = 2.0;
    std::size_t kernel_size = 8;
};

/// Per-band 8x8 Gaussian blur with reflect padding, then decimation by `scale`.
HsiCube walds_degrade(const HsiCube& x_ref, const DegradeOptions& opts = {});
Tensor walds_degrade(const Tensor& img, const DegradeOptions& opts = {});

/// [out,in] interpolation matrix for the Keys cubic kernel (a = -0.5) with
/// half-pixel centers and edge replication. When shrinking, the kernel is
/// widened by the shrink factor so the result is anti-aliased.
std::vector<double> bicubic_matrix(std::size_t in_size, std::size_t out_size);

/// Keys cubic convolution kernel, a = -0.5.
double keys_kernel(double x);

/// Separable bicubic resampling of a [C,H,W] tensor. Differentiable.
Tensor bicubic_resample(const Tensor& img, ScaleFactor factor);

/// p -> bicubic down x4 -> bicubic up x4.
Tensor make_pan_downup(const PanImage& pan);

/// Response-weighted band averages, [3,H,W] in blue, green, red order. Differentiable.
Tensor synthesize_rgb(const Tensor& cube, const RgbResponses& responses);

/// Uniform average over bands [band_lo, band_hi) (whole cube when band_hi == 0).
PanImage synthesize_pan(const HsiCube& x_ref, std::size_t band_lo = 0, std::size_t band_hi = 0);

/// Min-max stretch to [0,1] when any value falls outside it; otherwise unchanged.
HsiCube normalize_unit(const HsiCube& cube);

struct Sample {
    HsiCube x_ref;
    PanImage pan;
    HsiCube lr;
};

/// Deterministic synthetic scenes: smooth spectral signatures mixed by textured
/// abundance maps, plus band-correlated noise.
std::vector<Sample> synth_dataset(std::uint64_t seed, std::size_t n_patches, std::size_t bands, std::size_t height,
                                  std::size_t width, const DegradeOptions& degrade = {});

/// Builds the (x_ref, pan, lr) triple from a reference cube.
Sample make_sample(const HsiCube& x_ref, const DegradeOptions& degrade = {});

}  // namespace hyperpan
