#include "hyperpan/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "hyperpan/errors.hpp"
#include "hyperpan/image_pipeline.hpp"

namespace hyperpan {

// ---------------------------------------------------------------------------
// Configuration

std::size_t ModelConfig::window_at(std::size_t s) const {
    return std::min({window, height_at(s), width_at(s)});
}

std::size_t ModelConfig::reduced_length(std::size_t s) const {
    const std::size_t side = window_at(s);
    return static_cast<std::size_t>(std::llround(beta * static_cast<double>(side * side)));
}

void ModelConfig::validate() const {
    if (bands == 0) throw ContractError("model config: bands must be positive");
    if (hr_height < 4 || hr_width < 4 || hr_height % 4 != 0 || hr_width % 4 != 0) {
        throw DimensionError("model config: HR size " + std::to_string(hr_height) + "x" + std::to_string(hr_width) +
                             " must be a positive multiple of 4");
    }
    for (std::size_t c : channels)
        if (c == 0) throw ContractError("model config: feature channels must be positive");
    if (heads == 0) throw ContractError("model config: heads must be positive");
    if (!(beta > 0.0 && beta <= 1.0)) throw ContractError("model config: beta must lie in (0, 1]");
    if (window == 0) throw ContractError("model config: window must be positive");
    for (std::size_t s = 0; s < kScales; ++s) {
        if (!scales_enabled[s]) continue;
        const std::size_t w = window_at(s);
        if (height_at(s) % w != 0 || width_at(s) % w != 0) {
            throw DimensionError("model config: x" + std::to_string(kScaleTags[s]) + " map " +
                                 std::to_string(height_at(s)) + "x" + std::to_string(width_at(s)) +
                                 " does not tile into " + std::to_string(w) + "x" + std::to_string(w) + " windows");
        }
        if (reduced_length(s) == 0) {
            throw ContractError("model config: beta * " + std::to_string(w * w) + " rounds to an empty descriptor");
        }
    }
}

namespace {

const char* to_string(MeanMode m) { return m == MeanMode::Global ? "global" : "per_row"; }
const char* to_string(SoftmaxAxis a) { return a == SoftmaxAxis::Queries ? "queries" : "keys"; }
const char* to_string(Upsampler u) { return u == Upsampler::TransposedConv ? "transposed_conv" : "bicubic_conv"; }

template <typename E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<E> options) {
    const auto text = j.get<std::string>();
    for (E e : options)
        if (text == to_string(e)) return e;
    throw ContractError(std::string("model config: unknown value '") + text + "' for " + key);
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"bands", c.bands},
                       {"hr_height", c.hr_height},
                       {"hr_width", c.hr_width},
                       {"channels", c.channels},
                       {"heads", c.heads},
                       {"beta", c.beta},
                       {"window", c.window},
                       {"mean_mode", to_string(c.mean_mode)},
                       {"softmax_axis", to_string(c.softmax_axis)},
                       {"res_blocks", c.res_blocks},
                       {"upsampler", to_string(c.upsampler)},
                       {"scales_enabled", c.scales_enabled},
                       {"attention_bypass", c.attention_bypass}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (!j.is_object()) throw ContractError("model config: expected a JSON object");
    static const std::set<std::string> known{"bands",      "hr_height",    "hr_width",   "channels",
                                             "heads",      "beta",         "window",     "mean_mode",
                                             "softmax_axis", "res_blocks", "upsampler",  "scales_enabled",
                                             "attention_bypass"};
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw ContractError("model config: unknown key '" + key + "'");
    try {
        if (j.contains("bands")) j.at("bands").get_to(c.bands);
        if (j.contains("hr_height")) j.at("hr_height").get_to(c.hr_height);
        if (j.contains("hr_width")) j.at("hr_width").get_to(c.hr_width);
        if (j.contains("channels")) j.at("channels").get_to(c.channels);
        if (j.contains("heads")) j.at("heads").get_to(c.heads);
        if (j.contains("beta")) j.at("beta").get_to(c.beta);
        if (j.contains("window")) j.at("window").get_to(c.window);
        if (j.contains("mean_mode"))
            c.mean_mode = parse_enum(j.at("mean_mode"), "mean_mode", {MeanMode::Global, MeanMode::PerRow});
        if (j.contains("softmax_axis"))
            c.softmax_axis =
                parse_enum(j.at("softmax_axis"), "softmax_axis", {SoftmaxAxis::Queries, SoftmaxAxis::Keys});
        if (j.contains("res_blocks")) j.at("res_blocks").get_to(c.res_blocks);
        if (j.contains("upsampler"))
            c.upsampler =
                parse_enum(j.at("upsampler"), "upsampler", {Upsampler::TransposedConv, Upsampler::BicubicConv});
        if (j.contains("scales_enabled")) j.at("scales_enabled").get_to(c.scales_enabled);
        if (j.contains("attention_bypass")) j.at("attention_bypass").get_to(c.attention_bypass);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("model config: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Attention primitives

Tensor tile(const Tensor& x, std::size_t window) {
    if (x.rank() != 3) throw DimensionError("tile: expected [f,H,W], got " + shape_str(x.shape()));
    const std::size_t f = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (window == 0 || H % window != 0 || W % window != 0) {
        throw DimensionError("tile: " + shape_str(x.shape()) + " does not split into " + std::to_string(window) +
                             "-pixel windows");
    }
    const std::size_t nh = H / window, nw = W / window;
    if (nh == 1 && nw == 1) return reshape(x, {1, f, H * W});
    Tensor t = permute(reshape(x, {f, nh, window, nw, window}), {1, 3, 0, 2, 4});
    return reshape(t, {nh * nw, f, window * window});
}

Tensor untile(const Tensor& t, std::size_t height, std::size_t width, std::size_t window) {
    if (t.rank() != 3 || window == 0 || height % window != 0 || width % window != 0 ||
        t.dim(0) != (height / window) * (width / window) || t.dim(2) != window * window) {
        throw DimensionError("untile: " + shape_str(t.shape()) + " is not a tiling of " + std::to_string(height) +
                             "x" + std::to_string(width) + " with window " + std::to_string(window));
    }
    const std::size_t f = t.dim(1), nh = height / window, nw = width / window;
    if (nh == 1 && nw == 1) return reshape(t, {f, height, width});
    Tensor x = permute(reshape(t, {nh, nw, f, window, window}), {2, 0, 3, 1, 4});
    return reshape(x, {f, height, width});
}

namespace {

// [tiles, f, P^2] -> linear -> [tiles * heads, f, reduced]
Tensor project(const Tensor& tiles, const Linear& proj, std::size_t heads, const char* stream) {
    const std::size_t P2 = tiles.dim(2);
    if (proj.in_features() != P2 || proj.out_features() % heads != 0) {
        throw DimensionError(std::string("build_descriptors: ") + stream + " projection " +
                             shape_str(proj.weight.shape()) + " does not map length " + std::to_string(P2) +
                             " onto " + std::to_string(heads) + " heads");
    }
    const std::size_t T = tiles.dim(0), f = tiles.dim(1), L = proj.out_features() / heads;
    Tensor d = reshape(proj(tiles), {T, f, heads, L});
    return reshape(permute(d, {0, 2, 1, 3}), {T * heads, f, L});
}

Tensor centre(const Tensor& d, std::size_t tiles, MeanMode mode) {
    if (mode == MeanMode::PerRow) return d - mean(d, {2});
    const Shape shape = d.shape();
    Tensor flat = reshape(d, {tiles, d.numel() / tiles});
    return reshape(flat - mean(flat, {1}), shape);
}

}  // namespace

DescriptorSet build_descriptors(const Tensor& Q, const Tensor& K, const Tensor& V, const Linear& q_proj,
                                const Linear& k_proj, const Linear& v_proj, std::size_t heads, std::size_t window) {
    if (Q.rank() != 3 || K.rank() != 3 || V.rank() != 3) {
        throw DimensionError("build_descriptors: expected [f,H,W] maps, got " + shape_str(Q.shape()) + ", " +
                             shape_str(K.shape()) + ", " + shape_str(V.shape()));
    }
    if (Q.dim(0) != K.dim(0) || K.dim(0) != V.dim(0)) {
        throw ContractError("build_descriptors: feature counts differ (f_q=" + std::to_string(Q.dim(0)) +
                            ", f_k=" + std::to_string(K.dim(0)) + ", f_v=" + std::to_string(V.dim(0)) + ")");
    }
    if (Q.shape() != K.shape() || K.shape() != V.shape()) {
        throw DimensionError("build_descriptors: spatial sizes differ: " + shape_str(Q.shape()) + ", " +
                             shape_str(K.shape()) + ", " + shape_str(V.shape()));
    }
    if (heads == 0) throw ContractError("build_descriptors: heads must be positive");
    DescriptorSet d;
    d.heads = heads;
    Tensor qt = tile(Q, window);
    d.tiles = qt.dim(0);
    d.q = project(qt, q_proj, heads, "query");
    d.k = project(tile(K, window), k_proj, heads, "key");
    d.v = project(tile(V, window), v_proj, heads, "value");
    if (d.q.dim(2) == 0) throw ContractError("build_descriptors: reduced descriptor length is zero");
    return d;
}

Tensor cross_correlation(const DescriptorSet& d, MeanMode mean_mode) {
    if (d.q.rank() != 3 || d.q.shape() != d.k.shape()) {
        throw DimensionError("fcce: query descriptors " + shape_str(d.q.shape()) + " vs key descriptors " +
                             shape_str(d.k.shape()));
    }
    Tensor qc = centre(d.q, d.tiles, mean_mode);
    Tensor kc = centre(d.k, d.tiles, mean_mode);
    return matmul_batched(qc, permute(kc, {0, 2, 1}));
}

Tensor fcce(const DescriptorSet& d, MeanMode mean_mode, SoftmaxAxis axis) {
    return softmax(cross_correlation(d, mean_mode), axis == SoftmaxAxis::Queries ? 1 : 2);
}

Tensor mhfsa(const Tensor& c_tilde, const DescriptorSet& d, const Linear& out_proj, std::size_t height,
             std::size_t width, std::size_t window) {
    const Tensor& v = d.v;
    if (c_tilde.rank() != 3 || v.rank() != 3 || c_tilde.dim(0) != v.dim(0) || c_tilde.dim(2) != v.dim(1)) {
        throw DimensionError("mhfsa: attention " + shape_str(c_tilde.shape()) + " incompatible with values " +
                             shape_str(v.shape()));
    }
    const std::size_t T = d.tiles, N = d.heads, f = c_tilde.dim(1), L = v.dim(2);
    if (T * N != v.dim(0)) throw DimensionError("mhfsa: value batch " + shape_str(v.shape()) + " != tiles x heads");
    if (out_proj.in_features() != N * L || out_proj.out_features() != window * window) {
        throw DimensionError("mhfsa: output projection " + shape_str(out_proj.weight.shape()) + " expected [" +
                             std::to_string(window * window) + ", " + std::to_string(N * L) + "]");
    }
    Tensor t = matmul_batched(c_tilde, v);                                    // [T*N, f, L]
    t = reshape(permute(reshape(t, {T, N, f, L}), {0, 2, 1, 3}), {T, f, N * L});  // heads concatenated
    return untile(out_proj(t), height, width, window);
}

Tensor tsff(const Tensor& T, const Tensor& F, const Conv2d& conv, const BatchNorm2d& bn, bool training) {
    if (T.rank() != 3 || F.rank() != 3 || T.dim(1) != F.dim(1) || T.dim(2) != F.dim(2)) {
        throw DimensionError("tsff: texture " + shape_str(T.shape()) + " and features " + shape_str(F.shape()) +
                             " differ spatially");
    }
    return bn(conv(concat({T, F}, 0)), training);
}

// ---------------------------------------------------------------------------
// Network

Pyramid FeatureExtractor::operator()(const Tensor& x) const {
    Pyramid out;
    Tensor h = x;
    for (std::size_t s = 0; s < kScales; ++s) {
        h = relu(second[s](relu(first[s](h))));
        out[s] = h;
    }
    return out;
}

Tensor ResidualBlock::operator()(const Tensor& x) const { return x + b(leaky_relu(a(x))); }

Tensor Upsample::operator()(const Tensor& x) const {
    if (kind == Upsampler::TransposedConv) return leaky_relu(transposed(x));
    return leaky_relu(conv(bicubic_resample(x, ScaleFactor::up(2))));
}

namespace {

// Residual branches and the output head start small so that stacked blocks do
// not inflate the activations and an untrained model stays close to y_up.
constexpr double kResidualInitScale = 0.1;

std::string tag(std::size_t s) { return "x" + std::to_string(kScaleTags[s]); }

FeatureExtractor make_extractor(ParameterStore& store, const std::string& name, std::size_t in,
                                const std::array<std::size_t, kScales>& channels) {
    FeatureExtractor fe;
    std::size_t prev = in;
    for (std::size_t s = 0; s < kScales; ++s) {
        const std::string stage = name + ".stage" + std::to_string(s);
        fe.first[s] = store.conv(stage + ".conv1", prev, channels[s], 3, s == 0 ? 1 : 2, 1);
        fe.second[s] = store.conv(stage + ".conv2", channels[s], channels[s], 3, 1, 1);
        prev = channels[s];
    }
    return fe;
}

}  // namespace

HyperTransformer::HyperTransformer(ModelConfig config, std::uint64_t seed) : config_(config), store_(seed) {
    config_.validate();
    const auto& ch = config_.channels;
    const bool textured = config_.any_scale_enabled();
    if (textured) {
        fe_hsi_ = make_extractor(store_, "fe_hsi", config_.bands, ch);
        fe_pan_ = make_extractor(store_, "fe_pan", 1, ch);
    }
    stem_ = store_.conv("stem", config_.bands, ch[2], 3, 1, 1);
    for (std::size_t i = 0; i < kScales; ++i) {
        const std::size_t s = kScales - 1 - i;  // x1, x2, x4
        if (s + 1 < kScales) {
            Upsample& up = up_[1 - s];
            up.kind = config_.upsampler;
            const std::string name = "up." + tag(s);
            if (up.kind == Upsampler::TransposedConv) {
                up.transposed = store_.conv_transpose(name, ch[s + 1], ch[s], 2, 2);
            } else {
                up.conv = store_.conv(name, ch[s + 1], ch[s], 3, 1, 1);
            }
        }
        for (std::size_t r = 0; r < config_.res_blocks[s]; ++r) {
            const std::string name = "body." + tag(s) + ".rb" + std::to_string(r);
            body_[s].push_back({store_.conv(name + ".a", ch[s], ch[s], 3, 1, 1),
                                store_.conv(name + ".b", ch[s], ch[s], 3, 1, 1, kResidualInitScale)});
        }
        if (!config_.scales_enabled[s]) continue;
        TextureBlock& blk = blocks_[s];
        const std::string name = "texture." + tag(s);
        if (!config_.attention_bypass) {
            const std::size_t P2 = config_.window_at(s) * config_.window_at(s);
            const std::size_t NL = config_.heads * config_.reduced_length(s);
            blk.q_proj = store_.linear(name + ".q_proj", P2, NL);
            blk.k_proj = store_.linear(name + ".k_proj", P2, NL);
            blk.v_proj = store_.linear(name + ".v_proj", P2, NL);
            blk.out_proj = store_.linear(name + ".out_proj", NL, P2);
        }
        blk.fuse = store_.conv(name + ".fuse", 2 * ch[s], ch[s], 3, 1, 1);
        blk.norm = store_.batch_norm(name + ".norm", ch[s]);
    }
    head_ = store_.conv("head", ch[0], config_.bands, 3, 1, 1, kResidualInitScale);
}

Pyramid HyperTransformer::fe_hsi(const Tensor& y_up) const {
    if (!config_.any_scale_enabled()) throw ContractError("fe_hsi: model has no texture scales enabled");
    if (y_up.rank() != 3 || y_up.dim(0) != config_.bands) {
        throw ContractError("fe_hsi: expected " + std::to_string(config_.bands) + "-band input, got " +
                            shape_str(y_up.shape()));
    }
    return fe_hsi_(y_up);
}

Pyramid HyperTransformer::fe_pan(const Tensor& pan) const {
    if (!config_.any_scale_enabled()) throw ContractError("fe_pan: model has no texture scales enabled");
    if (pan.rank() != 3 || pan.dim(0) != 1) {
        throw ContractError("fe_pan: expected a 1-band input, got " + shape_str(pan.shape()));
    }
    return fe_pan_(pan);
}

Tensor HyperTransformer::transfer(std::size_t s, const Tensor& Q, const Tensor& K, const Tensor& V) const {
    const TextureBlock& blk = blocks_.at(s);
    if (!config_.scales_enabled[s] || config_.attention_bypass) {
        throw ContractError("transfer: attention at " + tag(s) + " is not part of this model");
    }
    const std::size_t window = config_.window_at(s);
    DescriptorSet d = build_descriptors(Q, K, V, blk.q_proj, blk.k_proj, blk.v_proj, config_.heads, window);
    Tensor c = fcce(d, config_.mean_mode, config_.softmax_axis);
    return mhfsa(c, d, blk.out_proj, Q.dim(1), Q.dim(2), window);
}

ForwardResult HyperTransformer::forward(const Tensor& y, const Tensor& pan, bool training) const {
    const auto& cfg = config_;
    if (y.rank() != 3 || y.dim(0) != cfg.bands) {
        throw ContractError("forward: expected a " + std::to_string(cfg.bands) + "-band LR cube, got " +
                            shape_str(y.shape()));
    }
    if (y.dim(1) != cfg.lr_height() || y.dim(2) != cfg.lr_width()) {
        throw DimensionError("forward: LR cube " + shape_str(y.shape()) + " does not match the configured " +
                             std::to_string(cfg.lr_height()) + "x" + std::to_string(cfg.lr_width()));
    }
    ForwardResult r;
    r.y_up = bicubic_resample(y, ScaleFactor::up(4));

    Pyramid Q, K, V;
    if (cfg.any_scale_enabled()) {
        if (pan.rank() != 3 || pan.dim(0) != 1 || pan.dim(1) != cfg.hr_height || pan.dim(2) != cfg.hr_width) {
            throw DimensionError("forward: PAN " + shape_str(pan.shape()) + " must be [1, " +
                                 std::to_string(cfg.hr_height) + ", " + std::to_string(cfg.hr_width) + "]");
        }
        V = fe_pan(pan);
        if (!cfg.attention_bypass) {
            K = fe_pan(make_pan_downup(PanImage(pan)));
            Q = fe_hsi(r.y_up);
        }
    }

    Tensor X = stem_(y);
    for (std::size_t i = 0; i < kScales; ++i) {
        const std::size_t s = kScales - 1 - i;
        if (s + 1 < kScales) X = up_[1 - s](X);
        for (const auto& rb : body_[s]) X = rb(X);
        if (!cfg.scales_enabled[s]) continue;
        Tensor T = cfg.attention_bypass ? V[s] : transfer(s, Q[s], K[s], V[s]);
        X = X + tsff(T, X, blocks_[s].fuse, blocks_[s].norm, training);
        r.textures[s] = T;
    }
    r.x = head_(X) + r.y_up;
    return r;
}

}  // namespace hyperpan
