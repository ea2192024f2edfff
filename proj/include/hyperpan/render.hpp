#pragma once

// Static diagnostic artifacts: 8-bit RGB PNG encoding, a perceptually uniform
// colormap, per-pixel MAE maps and synthesized-RGB previews.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "hyperpan/image_pipeline.hpp"

namespace hyperpan {

struct RgbImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

/// Truecolor, 8-bit, non-interlaced PNG with a single IDAT chunk.
std::vector<std::uint8_t> encode_png(const RgbImage& img);
void write_png(const std::filesystem::path& path, const RgbImage& img);

/// Viridis-style colormap: t in [0,1] (clamped) to 8-bit RGB.
std::array<std::uint8_t, 3> viridis(double t);

/// Mean absolute error across bands at each pixel: [C,H,W] x 2 -> [H,W] values.
std::vector<double> mae_map(const Tensor& x, const Tensor& x_ref);

/// Colors `values` (row-major h x w) on the fixed scale [0, vmax].
RgbImage render_heatmap(const std::vector<double>& values, std::size_t height, std::size_t width, double vmax);

/// Synthesized RGB preview of a cube; channels are clamped to [0,1] and rounded.
RgbImage render_rgb(const Tensor& cube, const RgbResponses& responses);

}  // namespace hyperpan
