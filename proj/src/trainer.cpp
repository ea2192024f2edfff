#include "hyperpan/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "hyperpan/binary_io.hpp"
#include "hyperpan/checkpoint.hpp"
#include "hyperpan/errors.hpp"

#ifndef HYPERPAN_SOURCE_HASH
#define HYPERPAN_SOURCE_HASH "unknown"
#endif

namespace hyperpan {

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<NamedTensor> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    if (!(opt_.learning_rate >= 0.0) || !(opt_.beta1 >= 0.0 && opt_.beta1 < 1.0) ||
        !(opt_.beta2 >= 0.0 && opt_.beta2 < 1.0) || !(opt_.eps > 0.0)) {
        throw ContractError("Adam: invalid hyperparameters");
    }
    for (const auto& p : params_) {
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
    }
}

void Adam::step() {
    for (const auto& p : params_) {
        if (!p.value.has_grad()) continue;
        for (double g : p.value.grad()) {
            if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor p = params_[i].value;
        auto data = p.mutable_data();
        const bool has = p.has_grad();
        auto grad = has ? p.grad() : std::span<const double>{};
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = has ? grad[k] : 0.0;
            m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * g;
            v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * g * g;
            const double mhat = m[k] / bc1, vhat = v[k] / bc2;
            data[k] -= opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

RgbResponses TrainConfig::effective_responses() const {
    return responses ? *responses : default_responses(model.bands);
}

void TrainConfig::validate() const {
    model.validate();
    weights.validate();
    if (!(adam.learning_rate >= 0.0) || !std::isfinite(adam.learning_rate)) {
        throw ContractError("train config: learning_rate must be finite and non-negative");
    }
    if (epochs == 0) throw ContractError("train config: epochs must be positive");
    for (const auto& r : effective_responses()) r.weights(model.bands);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    nlohmann::json responses = nullptr;
    if (c.responses) {
        responses = nlohmann::json::array();
        for (const auto& r : *c.responses) responses.push_back({r.center_band, r.sigma_bands});
    }
    j = nlohmann::json{{"model", c.model},
                       {"loss_weights", {{"rec", c.weights.rec}, {"vgg_per", c.weights.vgg_per}, {"t_per", c.weights.t_per}}},
                       {"adam",
                        {{"learning_rate", c.adam.learning_rate},
                         {"beta1", c.adam.beta1},
                         {"beta2", c.adam.beta2},
                         {"eps", c.adam.eps}}},
                       {"seed", c.seed},
                       {"epochs", c.epochs},
                       {"checkpoint_every", c.checkpoint_every},
                       {"perceptual_tap", c.perceptual_tap},
                       {"rgb_responses", responses},
                       {"perceptual_weights", c.perceptual_weights ? nlohmann::json(*c.perceptual_weights) : nlohmann::json()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw ContractError("train config: expected a JSON object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "model") {
                c.model = value.get<ModelConfig>();
            } else if (key == "loss_weights") {
                c.weights.rec = value.value("rec", c.weights.rec);
                c.weights.vgg_per = value.value("vgg_per", c.weights.vgg_per);
                c.weights.t_per = value.value("t_per", c.weights.t_per);
            } else if (key == "adam") {
                c.adam.learning_rate = value.value("learning_rate", c.adam.learning_rate);
                c.adam.beta1 = value.value("beta1", c.adam.beta1);
                c.adam.beta2 = value.value("beta2", c.adam.beta2);
                c.adam.eps = value.value("eps", c.adam.eps);
            } else if (key == "seed") {
                value.get_to(c.seed);
            } else if (key == "epochs") {
                value.get_to(c.epochs);
            } else if (key == "checkpoint_every") {
                value.get_to(c.checkpoint_every);
            } else if (key == "perceptual_tap") {
                value.get_to(c.perceptual_tap);
            } else if (key == "perceptual_weights") {
                if (value.is_null()) {
                    c.perceptual_weights.reset();
                } else {
                    c.perceptual_weights = value.get<std::string>();
                }
            } else if (key == "rgb_responses") {
                if (value.is_null()) {
                    c.responses.reset();
                } else {
                    if (!value.is_array() || value.size() != 3) {
                        throw ContractError("train config: rgb_responses must list 3 [center, sigma] pairs");
                    }
                    RgbResponses r;
                    for (std::size_t i = 0; i < 3; ++i) {
                        r[i].center_band = value[i].at(0).get<std::size_t>();
                        r[i].sigma_bands = value[i].at(1).get<double>();
                    }
                    c.responses = r;
                }
            } else {
                throw ContractError("train config: unknown key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("train config: ") + e.what());
    }
}

std::string config_hash(const nlohmann::json& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : config.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string source_hash() { return HYPERPAN_SOURCE_HASH; }

nlohmann::json to_json(const RunManifest& m) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& e : m.trace) {
        nlohmann::json row{{"epoch", e.epoch}, {"loss", json_number(e.loss)}};
        if (e.rec) row["rec"] = json_number(*e.rec);
        if (e.vgg_per) row["vgg_per"] = json_number(*e.vgg_per);
        if (e.t_per) row["t_per"] = json_number(*e.t_per);
        trace.push_back(row);
    }
    return {{"config", m.config},
            {"config_hash", m.config_hash},
            {"source_hash", m.source_hash},
            {"seed", m.seed},
            {"dataset", m.dataset},
            {"parameter_count", m.parameter_count},
            {"loss_trace", trace},
            {"best", {{"epoch", m.best_epoch}, {"psnr_db", json_number(m.best_psnr)}}},
            {"checkpoints", m.checkpoints},
            {"final_metrics", to_json(m.final_metrics)}};
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

void check_sample(const ModelConfig& cfg, const Sample& s, std::size_t index) {
    const auto& x = s.x_ref.data;
    if (x.rank() != 3 || x.dim(0) != cfg.bands || x.dim(1) != cfg.hr_height || x.dim(2) != cfg.hr_width ||
        s.lr.data.shape() != Shape{cfg.bands, cfg.lr_height(), cfg.lr_width()} ||
        s.pan.data.shape() != Shape{1, cfg.hr_height, cfg.hr_width}) {
        throw ContractError("sample " + std::to_string(index) + " (reference " + shape_str(x.shape()) + ", LR " +
                            shape_str(s.lr.data.shape()) + ", PAN " + shape_str(s.pan.data.shape()) +
                            ") does not fit the model configured for " + std::to_string(cfg.bands) + " bands at " +
                            std::to_string(cfg.hr_height) + "x" + std::to_string(cfg.hr_width));
    }
}

}  // namespace

Tensor predict(const HyperTransformer& model, const Sample& s) {
    NoGradGuard no_grad;
    return model.forward(s.lr.data, s.pan.data, /*training=*/false).x;
}

MetricsReport evaluate(const HyperTransformer& model, const std::vector<Sample>& data) {
    if (data.empty()) throw ContractError("evaluate: empty dataset");
    std::vector<MetricsReport> reports;
    for (std::size_t i = 0; i < data.size(); ++i) {
        check_sample(model.config(), data[i], i);
        reports.push_back(compute_metrics(predict(model, data[i]), data[i].x_ref.data));
    }
    return average(reports);
}

MetricsReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::vector<Sample>& data) {
    return evaluate(load_checkpoint(checkpoint), data);
}

MetricsReport evaluate_bicubic(const std::vector<Sample>& data) {
    if (data.empty()) throw ContractError("evaluate_bicubic: empty dataset");
    std::vector<MetricsReport> reports;
    for (const auto& s : data) {
        reports.push_back(compute_metrics(bicubic_resample(s.lr.data, ScaleFactor::up(4)), s.x_ref.data));
    }
    return average(reports);
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::string epoch_name(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%04zu.ckpt", epoch);
    return buf;
}

// Fisher-Yates with a portable index draw.
std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    return order;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<Sample>& dataset, const TrainOptions& options) {
    config.validate();
    if (dataset.empty()) throw ContractError("train: empty dataset");
    for (std::size_t i = 0; i < dataset.size(); ++i) check_sample(config.model, dataset[i], i);
    const std::vector<Sample>& eval_set = options.eval_set.empty() ? dataset : options.eval_set;
    for (std::size_t i = 0; i < eval_set.size(); ++i) check_sample(config.model, eval_set[i], i);

    HyperTransformer model(config.model, config.seed);
    const PerceptualNet net = config.perceptual_weights
                                  ? load_perceptual_net(*config.perceptual_weights, config.perceptual_tap)
                                  : PerceptualNet(config.seed ^ 0x5bd1e995ULL, config.perceptual_tap);
    const RgbResponses responses = config.effective_responses();
    Adam adam(model.store().parameters(), config.adam);
    std::mt19937_64 order_rng(config.seed);

    RunManifest manifest;
    manifest.config = config;
    manifest.config_hash = config_hash(manifest.config);
    manifest.source_hash = source_hash();
    manifest.seed = config.seed;
    manifest.dataset = options.dataset;
    manifest.parameter_count = model.store().parameter_count();
    manifest.best_psnr = -std::numeric_limits<double>::infinity();

    if (options.out_dir) std::filesystem::create_directories(*options.out_dir);
    auto write_checkpoint = [&](const std::string& name) {
        if (!options.out_dir) return;
        save_checkpoint(*options.out_dir / name, model, config.seed);
        manifest.checkpoints.push_back(name);
    };

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        const double inv = 1.0 / static_cast<double>(dataset.size());
        for (std::size_t idx : shuffled(dataset.size(), order_rng)) {
            const Sample& s = dataset[idx];
            model.store().zero_grad();
            ForwardResult fr = model.forward(s.lr.data, s.pan.data, /*training=*/true);
            LossTerms terms =
                loss_overall(fr.x, s.x_ref.data, fr.textures, model, net, responses, config.weights);
            const double value = terms.total.item();
            if (!std::isfinite(value)) {
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", patch " +
                                    std::to_string(idx));
            }
            terms.total.backward();
            adam.step();
            rec.loss += value * inv;
            auto add = [inv](std::optional<double>& acc, const std::optional<double>& v) {
                if (v) acc = acc.value_or(0.0) + *v * inv;
            };
            add(rec.rec, terms.rec);
            add(rec.vgg_per, terms.vgg_per);
            add(rec.t_per, terms.t_per);
        }
        manifest.trace.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);

        const bool cadence = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        if (cadence || epoch == config.epochs) {
            // Score what a reader of the checkpoint would get, not the in-memory doubles.
            const MetricsReport report = evaluate(decode_checkpoint(encode_checkpoint(model, config.seed)), eval_set);
            if (cadence) write_checkpoint(epoch_name(epoch));
            if (report.psnr_db > manifest.best_psnr) {
                manifest.best_psnr = report.psnr_db;
                manifest.best_epoch = epoch;
                if (options.out_dir) save_checkpoint(*options.out_dir / "best.ckpt", model, config.seed);
            }
            if (epoch == config.epochs) manifest.final_metrics = report;
        }
    }
    write_checkpoint("final.ckpt");
    if (options.out_dir) {
        if (manifest.best_epoch > 0) manifest.checkpoints.push_back("best.ckpt");
        io::write_text_atomic(*options.out_dir / "manifest.json", to_json(manifest).dump(2) + "\n");
    }
    return {std::move(model), std::move(manifest)};
}

}  // namespace hyperpan
