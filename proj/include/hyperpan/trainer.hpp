#pragma once

// Optimization loop, Adam, evaluation and run manifests.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hyperpan/image_pipeline.hpp"
#include "hyperpan/losses.hpp"
#include "hyperpan/metrics.hpp"
#include "hyperpan/model.hpp"
#include "json.hpp"

namespace hyperpan {

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction over a fixed parameter list. Parameters that
/// received no gradient in a step are treated as having a zero gradient.
class Adam {
public:
    Adam(std::vector<NamedTensor> params, AdamOptions options);

    /// Throws TrainingError naming the first parameter with a non-finite
    /// gradient; nothing is updated in that case.
    void step();
    std::size_t steps() const { return t_; }
    const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

private:
    std::vector<NamedTensor> params_;
    AdamOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    ModelConfig model;
    LossWeights weights;
    AdamOptions adam;
    std::uint64_t seed = 0;
    std::size_t epochs = 200;
    std::size_t checkpoint_every = 50;
    std::size_t perceptual_tap = PerceptualNet::kDefaultTap;
    /// RGB responses for the perceptual loss; derived from the band count when absent.
    std::optional<RgbResponses> responses;
    /// Perceptual-net weight file; a frozen random net seeded from `seed` when absent.
    std::optional<std::string> perceptual_weights;

    RgbResponses effective_responses() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// FNV-1a 64 over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);
/// Hash of the library sources this binary was built from.
std::string source_hash();

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    std::optional<double> rec, vgg_per, t_per;
};

struct RunManifest {
    nlohmann::json config;
    std::string config_hash;
    std::string source_hash;
    std::uint64_t seed = 0;
    nlohmann::json dataset;  // caller-supplied description (seed, sizes, degradation)
    std::size_t parameter_count = 0;
    std::vector<EpochRecord> trace;
    std::size_t best_epoch = 0;
    double best_psnr = 0.0;
    std::vector<std::string> checkpoints;
    MetricsReport final_metrics;
};

nlohmann::json to_json(const RunManifest& m);

struct TrainOptions {
    /// Checkpoints and manifest go here when set.
    std::optional<std::filesystem::path> out_dir;
    /// Patches for best-checkpoint selection and the final report; the training set when empty.
    std::vector<Sample> eval_set;
    nlohmann::json dataset = nlohmann::json::object();
    /// Called after each epoch.
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    HyperTransformer model;
    RunManifest manifest;
};

/// Patch-at-a-time training: forward -> loss_overall -> backward -> Adam for
/// every patch in every epoch. Throws TrainingError on a non-finite loss;
/// checkpoints already written are left in place.
TrainResult train(const TrainConfig& config, const std::vector<Sample>& dataset, const TrainOptions& options = {});

/// Eval-mode prediction for one sample.
Tensor predict(const HyperTransformer& model, const Sample& s);

/// Metrics averaged over the samples, in eval mode (running BN statistics).
/// Throws ContractError when a sample does not fit the model configuration.
MetricsReport evaluate(const HyperTransformer& model, const std::vector<Sample>& data);
MetricsReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::vector<Sample>& data);
/// The bicubic-upsampling floor: x = bicubic x4 of the LR cube.
MetricsReport evaluate_bicubic(const std::vector<Sample>& data);

}  // namespace hyperpan
