#pragma once

// Cube container, little-endian:
//
//   offset  size  field
//   0       4     magic "HSI1"
//   4       1     dtype (0 = f32, 1 = f64)
//   5       3     reserved, zero
//   8       12    C, H, W as u32
//   20      ...   C*H*W scalars, band-major (C,H,W)
//
// A PAN image is stored as a 1-band cube.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hyperpan/image_pipeline.hpp"

namespace hyperpan {

enum class CubeDtype : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::size_t kCubeHeaderBytes = 20;

std::vector<std::uint8_t> encode_cube(const Tensor& cube, CubeDtype dtype = CubeDtype::F64);
/// Throws FormatError (with byte offset) on bad magic, unknown dtype, bad dims or a payload of the wrong length.
Tensor decode_cube(const std::vector<std::uint8_t>& bytes);

void save_cube(const std::filesystem::path& path, const HsiCube& cube, CubeDtype dtype = CubeDtype::F64);
void save_cube(const std::filesystem::path& path, const PanImage& pan, CubeDtype dtype = CubeDtype::F64);
HsiCube load_cube(const std::filesystem::path& path);
PanImage load_pan(const std::filesystem::path& path);

}  // namespace hyperpan
