#include "hyperpan/render.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>

#include "hyperpan/binary_io.hpp"
#include "hyperpan/errors.hpp"

namespace hyperpan {

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& body) {
    put_u32_be(out, static_cast<std::uint32_t>(body.size()));
    const std::size_t type_at = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    const uLong crc = crc32(0L, out.data() + type_at, static_cast<uInt>(body.size() + 4));
    put_u32_be(out, static_cast<std::uint32_t>(crc));
}

// Viridis sampled at nine evenly spaced points; intermediate values are interpolated linearly.
constexpr double kViridis[9][3] = {
    {0.267004, 0.004874, 0.329415}, {0.278826, 0.175490, 0.483397}, {0.229739, 0.322361, 0.545706},
    {0.172719, 0.448791, 0.557885}, {0.127568, 0.566949, 0.550556}, {0.157851, 0.683765, 0.501686},
    {0.369214, 0.788888, 0.382914}, {0.678489, 0.863742, 0.189503}, {0.993248, 0.906157, 0.143936},
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::vector<std::uint8_t> encode_png(const RgbImage& img) {
    if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height * 3) {
        throw DimensionError("encode_png: pixel buffer does not match " + std::to_string(img.width) + "x" +
                             std::to_string(img.height));
    }
    std::vector<std::uint8_t> raw;
    raw.reserve(img.height * (1 + img.width * 3));
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter: none
        const auto* row = img.pixels.data() + y * img.width * 3;
        raw.insert(raw.end(), row, row + img.width * 3);
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> packed(packed_size);
    if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK) {
        throw std::runtime_error("encode_png: deflate failed");
    }
    packed.resize(packed_size);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
    put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit depth, truecolor, deflate, adaptive filters, no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", packed);
    put_chunk(out, "IEND", {});
    return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& img) { io::write_file_atomic(path, encode_png(img)); }

std::array<std::uint8_t, 3> viridis(double t) {
    t = std::isnan(t) ? 0.0 : std::clamp(t, 0.0, 1.0);
    const double pos = t * 8.0;
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(pos), 7);
    const double f = pos - static_cast<double>(i);
    std::array<std::uint8_t, 3> rgb{};
    for (int c = 0; c < 3; ++c) rgb[c] = to_byte(kViridis[i][c] * (1.0 - f) + kViridis[i + 1][c] * f);
    return rgb;
}

std::vector<double> mae_map(const Tensor& x, const Tensor& x_ref) {
    if (x.rank() != 3 || x.shape() != x_ref.shape()) {
        throw DimensionError("mae_map: expected equal [C,H,W] shapes, got " + shape_str(x.shape()) + " and " +
                             shape_str(x_ref.shape()));
    }
    const std::size_t C = x.dim(0), n = x.dim(1) * x.dim(2);
    auto a = x.data(), b = x_ref.data();
    std::vector<double> out(n, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) out[i] += std::abs(a[c * n + i] - b[c * n + i]);
    for (double& v : out) v /= static_cast<double>(C);
    return out;
}

RgbImage render_heatmap(const std::vector<double>& values, std::size_t height, std::size_t width, double vmax) {
    if (values.size() != height * width) throw DimensionError("render_heatmap: value count does not match size");
    if (!(vmax > 0.0)) throw ContractError("render_heatmap: scale maximum must be positive");
    RgbImage img{width, height, {}};
    img.pixels.reserve(values.size() * 3);
    for (double v : values) {
        const auto rgb = viridis(v / vmax);
        img.pixels.insert(img.pixels.end(), rgb.begin(), rgb.end());
    }
    return img;
}

RgbImage render_rgb(const Tensor& cube, const RgbResponses& responses) {
    const Tensor rgb = synthesize_rgb(cube.detach(), responses);
    const std::size_t h = rgb.dim(1), w = rgb.dim(2), n = h * w;
    auto d = rgb.data();
    RgbImage img{w, h, {}};
    img.pixels.reserve(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
        // Responses are ordered blue, green, red.
        img.pixels.push_back(to_byte(d[2 * n + i]));
        img.pixels.push_back(to_byte(d[1 * n + i]));
        img.pixels.push_back(to_byte(d[i]));
    }
    return img;
}

}  // namespace hyperpan
