#include "hyperpan/checkpoint.hpp"

#include <limits>

#include "hyperpan/binary_io.hpp"
#include "hyperpan/errors.hpp"

namespace hyperpan {

std::vector<std::uint8_t> encode_parameter_file(const ParameterFile& file) {
    io::ByteWriter w;
    w.str("HTCK");
    w.u32(kCheckpointVersion);
    const std::string config = file.config.dump();
    w.u32(static_cast<std::uint32_t>(config.size()));
    w.str(config);
    for (const auto& [name, t] : file.tensors) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            if (d > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("checkpoint: dimension too large");
            w.u32(static_cast<std::uint32_t>(d));
        }
        for (double v : t.data()) w.f32(static_cast<float>(v));
    }
    return w.take();
}

ParameterFile decode_parameter_file(const std::vector<std::uint8_t>& bytes) {
    io::ByteReader r(bytes);
    if (r.str(4, "magic") != "HTCK") throw FormatError("bad magic, expected \"HTCK\"", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    const std::uint32_t config_len = r.u32("config length");
    const std::size_t config_at = r.offset();
    ParameterFile file;
    try {
        file.config = nlohmann::json::parse(r.str(config_len, "config JSON"));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("config JSON: ") + e.what(), config_at);
    }
    while (r.remaining() > 0) {
        const std::uint32_t name_len = r.u32("tensor name length");
        std::string name = r.str(name_len, "tensor name");
        const std::size_t rank_at = r.offset();
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(rank), rank_at);
        Shape shape(rank);
        std::size_t count = 1;
        for (auto& d : shape) {
            d = r.u32("tensor dimension");
            if (d != 0 && count > r.remaining() / d) {
                throw FormatError("tensor '" + name + "' is larger than the file", r.offset());
            }
            count *= d;
        }
        r.need(count * 4, "tensor payload");
        std::vector<double> data(count);
        for (auto& v : data) v = static_cast<double>(r.f32("tensor payload"));
        file.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return file;
}

namespace {

Tensor stats_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const HyperTransformer& model, std::uint64_t seed) {
    ParameterFile file;
    file.config = {{"model", model.config()}, {"seed", seed}};
    for (const auto& p : model.store().parameters()) file.tensors.push_back(p);
    for (const auto& b : model.store().buffers()) {
        file.tensors.push_back({b.name + ".running_mean", stats_tensor(b.stats->mean)});
        file.tensors.push_back({b.name + ".running_var", stats_tensor(b.stats->var)});
    }
    return encode_parameter_file(file);
}

HyperTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    ParameterFile file = decode_parameter_file(bytes);
    ModelConfig config;
    std::uint64_t seed = 0;
    try {
        config = file.config.at("model").get<ModelConfig>();
        seed = file.config.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what(), 12);
    }
    HyperTransformer model(config, seed);
    const auto& params = model.store().parameters();
    const auto& buffers = model.store().buffers();
    const std::size_t expected = params.size() + 2 * buffers.size();
    if (file.tensors.size() != expected) {
        throw ContractError("checkpoint holds " + std::to_string(file.tensors.size()) + " tensors, model expects " +
                            std::to_string(expected));
    }
    auto load = [](const NamedTensor& src, const std::string& name, const Shape& shape, std::span<double> dst) {
        if (src.name != name || src.value.shape() != shape) {
            throw ContractError("checkpoint tensor '" + src.name + "' " + shape_str(src.value.shape()) +
                                " does not match model tensor '" + name + "' " + shape_str(shape));
        }
        std::copy(src.value.data().begin(), src.value.data().end(), dst.begin());
    };
    std::size_t i = 0;
    for (const auto& p : params) {
        Tensor t = p.value;
        load(file.tensors[i++], p.name, t.shape(), t.mutable_data());
    }
    for (const auto& b : buffers) {
        load(file.tensors[i++], b.name + ".running_mean", {b.stats->mean.size()}, b.stats->mean);
        load(file.tensors[i++], b.name + ".running_var", {b.stats->var.size()}, b.stats->var);
    }
    return model;
}

void save_checkpoint(const std::filesystem::path& path, const HyperTransformer& model, std::uint64_t seed) {
    io::write_file_atomic(path, encode_checkpoint(model, seed));
}

HyperTransformer load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

void save_perceptual_net(const std::filesystem::path& path, const PerceptualNet& net) {
    ParameterFile file;
    file.config = {{"kind", "perceptual_net"}};
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const std::string stem = "conv" + std::to_string(i + 1);
        file.tensors.push_back({stem + ".weight", net.layers()[i].weight});
        file.tensors.push_back({stem + ".bias", net.layers()[i].bias});
    }
    io::write_file_atomic(path, encode_parameter_file(file));
}

PerceptualNet load_perceptual_net(const std::filesystem::path& path, std::size_t tap) {
    ParameterFile file = decode_parameter_file(io::read_file(path));
    if (file.config.value("kind", "") != "perceptual_net") {
        throw FormatError("not a perceptual-net weight file (config kind is not \"perceptual_net\")", 12);
    }
    if (file.tensors.empty() || file.tensors.size() % 2 != 0) {
        throw ContractError("perceptual-net file holds " + std::to_string(file.tensors.size()) +
                            " tensors, expected weight/bias pairs");
    }
    std::vector<Conv2d> layers;
    for (std::size_t i = 0; i < file.tensors.size(); i += 2) {
        const std::string stem = "conv" + std::to_string(i / 2 + 1);
        const auto& w = file.tensors[i];
        const auto& b = file.tensors[i + 1];
        if (w.name != stem + ".weight" || b.name != stem + ".bias" || w.value.rank() != 4 || b.value.rank() != 1 ||
            b.value.dim(0) != w.value.dim(0)) {
            throw ContractError("perceptual-net file: unexpected tensors '" + w.name + "' " + shape_str(w.value.shape()) +
                                ", '" + b.name + "' " + shape_str(b.value.shape()));
        }
        layers.push_back(Conv2d{w.value, b.value, 1, 1});
    }
    return PerceptualNet(std::move(layers), tap);
}

}  // namespace hyperpan
