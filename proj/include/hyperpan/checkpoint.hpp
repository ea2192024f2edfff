#pragma once

// Parameter files, little-endian:
//
//   magic "HTCK" | version u32 | config length u32 | config JSON (UTF-8)
//   then one blob per tensor, in declaration order:
//     name length u32 | name | rank u32 | dims u32[rank] | f32 payload
//
// A model checkpoint stores every trainable parameter followed by each batch
// norm's running mean and variance ("<layer>.running_mean" / ".running_var").
// A perceptual-net weight file stores "conv<i>.weight" / "conv<i>.bias" for
// each layer under the config {"kind": "perceptual_net"}.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hyperpan/losses.hpp"
#include "hyperpan/model.hpp"
#include "json.hpp"

namespace hyperpan {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParameterFile {
    nlohmann::json config;
    std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_parameter_file(const ParameterFile& file);
/// Throws FormatError with the failing byte offset.
ParameterFile decode_parameter_file(const std::vector<std::uint8_t>& bytes);

/// Config JSON is {"model": ModelConfig, "seed": seed}.
std::vector<std::uint8_t> encode_checkpoint(const HyperTransformer& model, std::uint64_t seed);
/// Rebuilds the model described by the header and loads every tensor into it.
HyperTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const HyperTransformer& model, std::uint64_t seed);
HyperTransformer load_checkpoint(const std::filesystem::path& path);

/// Frozen perceptual-net weights, e.g. converted from pretrained VGG layers.
void save_perceptual_net(const std::filesystem::path& path, const PerceptualNet& net);
/// Throws FormatError on a file that is not a perceptual-net weight file.
PerceptualNet load_perceptual_net(const std::filesystem::path& path, std::size_t tap);

}  // namespace hyperpan
