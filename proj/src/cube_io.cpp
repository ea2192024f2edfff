#include "hyperpan/cube_io.hpp"

#include <limits>

#include "hyperpan/binary_io.hpp"
#include "hyperpan/errors.hpp"

namespace hyperpan {

std::vector<std::uint8_t> encode_cube(const Tensor& cube, CubeDtype dtype) {
    if (cube.rank() != 3) throw DimensionError("encode_cube: expected [C,H,W], got " + shape_str(cube.shape()));
    for (std::size_t d : cube.shape()) {
        if (d == 0 || d > std::numeric_limits<std::uint32_t>::max()) {
            throw DimensionError("encode_cube: dimension out of u32 range in " + shape_str(cube.shape()));
        }
    }
    io::ByteWriter w;
    w.str("HSI1");
    w.u8(static_cast<std::uint8_t>(dtype));
    w.u8(0);
    w.u8(0);
    w.u8(0);
    for (std::size_t d : cube.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : cube.data()) {
        if (dtype == CubeDtype::F32) {
            w.f32(static_cast<float>(v));
        } else {
            w.f64(v);
        }
    }
    return w.take();
}

Tensor decode_cube(const std::vector<std::uint8_t>& bytes) {
    io::ByteReader r(bytes);
    if (r.str(4, "magic") != "HSI1") throw FormatError("bad magic, expected \"HSI1\"", 0);
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype), 4);
    r.str(3, "reserved bytes");
    Shape shape(3);
    for (auto& d : shape) {
        const std::size_t at = r.offset();
        d = r.u32("dimension");
        if (d == 0) throw FormatError("zero-sized dimension", at);
    }
    const std::size_t scalar = dtype == 0 ? 4 : 8;
    // Guard the payload length computation against overflow before trusting it.
    const auto max = std::numeric_limits<std::size_t>::max();
    if (shape[0] > max / shape[1] || shape[0] * shape[1] > max / shape[2] ||
        shape[0] * shape[1] * shape[2] > max / scalar) {
        throw FormatError("dimension overflow " + shape_str(shape), 8);
    }
    const std::size_t count = shape[0] * shape[1] * shape[2];
    if (r.remaining() != count * scalar) {
        throw FormatError("payload holds " + std::to_string(r.remaining()) + " bytes, dims " + shape_str(shape) +
                              " require " + std::to_string(count * scalar),
                          r.offset() + std::min(r.remaining(), count * scalar));
    }
    std::vector<double> data(count);
    for (auto& v : data) v = dtype == 0 ? static_cast<double>(r.f32("payload")) : r.f64("payload");
    return Tensor(std::move(shape), std::move(data));
}

void save_cube(const std::filesystem::path& path, const HsiCube& cube, CubeDtype dtype) {
    io::write_file_atomic(path, encode_cube(cube.data, dtype));
}

void save_cube(const std::filesystem::path& path, const PanImage& pan, CubeDtype dtype) {
    io::write_file_atomic(path, encode_cube(pan.data, dtype));
}

HsiCube load_cube(const std::filesystem::path& path) {
    return HsiCube(decode_cube(io::read_file(path)));
}

PanImage load_pan(const std::filesystem::path& path) {
    Tensor t = load_cube(path).data;
    if (t.dim(0) != 1) throw ContractError(path.string() + ": PAN file has " + std::to_string(t.dim(0)) + " bands");
    return PanImage(std::move(t));
}

}  // namespace hyperpan
