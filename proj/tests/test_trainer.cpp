#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include "doctest.h"
#include "hyperpan/binary_io.hpp"
#include "hyperpan/checkpoint.hpp"
#include "hyperpan/errors.hpp"
#include "hyperpan/trainer.hpp"
#include "support.hpp"

using namespace hyperpan;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("hyperpan_test_trainer_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

TrainConfig tiny_train_config() {
    TrainConfig c;
    c.model.bands = 3;
    c.model.hr_height = 8;
    c.model.hr_width = 8;
    c.model.channels = {2, 3, 4};
    c.model.heads = 2;
    c.model.beta = 0.5;
    c.model.window = 4;
    c.model.res_blocks = {1, 1, 1};
    c.seed = 42;
    c.epochs = 4;
    c.checkpoint_every = 2;
    return c;
}

std::vector<Sample> tiny_data(const TrainConfig& c, std::size_t n = 2, std::uint64_t seed = 5) {
    return synth_dataset(seed, n, c.model.bands, c.model.hr_height, c.model.hr_width);
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool same_parameters(const HyperTransformer& a, const HyperTransformer& b) {
    auto pa = a.store().parameters(), pb = b.store().parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].name != pb[i].name || !same_bits(pa[i].value.data(), pb[i].value.data())) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("adam first step matches the bias-corrected hand computation") {
    Tensor p({4}, {0.5, -1.0, 2.0, 0.25}, true);
    const std::vector<double> g = {0.1, -0.2, 0.0, 3e-9};
    Adam adam({{"p", p}}, AdamOptions{});
    sum(mul(p, Tensor({4}, g))).backward();
    adam.step();
    const std::vector<double> p0 = {0.5, -1.0, 2.0, 0.25};
    for (std::size_t i = 0; i < 4; ++i) {
        // After one step mhat = g and vhat = g^2, so the update is lr * g / (|g| + eps).
        const double want = p0[i] - 1e-3 * g[i] / (std::abs(g[i]) + 1e-8);
        CHECK(p.data()[i] == doctest::Approx(want).epsilon(1e-15));
        CHECK(adam.first_moment(0)[i] == doctest::Approx(0.1 * g[i]).epsilon(1e-15));
        CHECK(adam.second_moment(0)[i] == doctest::Approx(0.001 * g[i] * g[i]).epsilon(1e-15));
    }
    CHECK(p.data()[2] == 2.0);
    CHECK(adam.steps() == 1);
}

TEST_CASE("adam with zero gradient: parameters unchanged from rest, moments decay") {
    Tensor p({2}, {0.3, -0.7}, true);
    Adam adam({{"p", p}}, AdamOptions{});
    // No gradient at all counts as zero.
    adam.step();
    CHECK(p.data()[0] == 0.3);
    CHECK(p.data()[1] == -0.7);
    CHECK(adam.first_moment(0)[0] == 0.0);

    sum(mul(p, Tensor({2}, {1.0, -2.0}))).backward();
    adam.step();
    const auto m1 = adam.first_moment(0), v1 = adam.second_moment(0);
    p.zero_grad();
    sum(mul_scalar(p, 0.0)).backward();
    adam.step();
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(adam.first_moment(0)[i] == 0.9 * m1[i]);
        CHECK(adam.second_moment(0)[i] == 0.999 * v1[i]);
    }
}

TEST_CASE("adam refuses a non-finite gradient and names the parameter") {
    Tensor a({2}, {1.0, 2.0}, true), b({2}, {3.0, 4.0}, true);
    Adam adam({{"a", a}, {"b", b}}, AdamOptions{});
    (sum(a) + sum(mul(b, Tensor({2}, {std::numeric_limits<double>::quiet_NaN(), 1.0})))).backward();
    CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("'b'"), TrainingError);
    CHECK(a.data()[0] == 1.0);
    CHECK(b.data()[1] == 4.0);
    CHECK(adam.steps() == 0);
}

TEST_CASE("learning rate zero leaves every parameter bit-identical") {
    TrainConfig c = tiny_train_config();
    c.adam.learning_rate = 0.0;
    c.epochs = 3;
    auto result = train(c, tiny_data(c));
    HyperTransformer fresh(c.model, c.seed);
    CHECK(same_parameters(result.model, fresh));
}

TEST_CASE("training lowers the loss and is bit-reproducible") {
    TrainConfig c = tiny_train_config();
    c.epochs = 30;
    c.checkpoint_every = 10;
    auto data = tiny_data(c, 1);
    auto a = train(c, data);
    auto b = train(c, data);
    CHECK(to_json(a.manifest).dump() == to_json(b.manifest).dump());
    CHECK(same_parameters(a.model, b.model));
    CHECK(a.manifest.trace.back().loss < a.manifest.trace.front().loss);
    CHECK(a.manifest.trace.size() == 30);
    CHECK(a.manifest.config_hash.size() == 16);
    CHECK(a.manifest.source_hash == source_hash());

    TrainConfig other = c;
    other.seed = 43;
    CHECK(train(other, data).manifest.config_hash != a.manifest.config_hash);
}

TEST_CASE("run directory: cadence checkpoints, best, final and manifest") {
    TrainConfig c = tiny_train_config();
    auto data = tiny_data(c);
    auto dir = temp_dir("run");
    TrainOptions opts;
    opts.out_dir = dir;
    opts.dataset = {{"seed", 5}, {"patches", 2}};
    std::size_t calls = 0;
    opts.on_epoch = [&](const EpochRecord& r) { CHECK(r.epoch == ++calls); };
    auto result = train(c, data, opts);
    CHECK(calls == 4);
    for (auto name : {"epoch_0002.ckpt", "epoch_0004.ckpt", "final.ckpt", "best.ckpt", "manifest.json"}) {
        CHECK(std::filesystem::exists(dir / name));
    }
    auto manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    CHECK(manifest == nlohmann::json::parse(to_json(result.manifest).dump()));
    CHECK(manifest["dataset"]["patches"] == 2);
    CHECK(manifest["loss_trace"].size() == 4);
    CHECK(manifest["config"]["model"]["bands"] == 3);

    // The final report was computed from the same f32 parameters that final.ckpt stores.
    auto reloaded = evaluate_checkpoint(dir / "final.ckpt", data);
    CHECK(to_json(reloaded).dump() == to_json(result.manifest.final_metrics).dump());
    // Evaluating a checkpoint twice yields the same report.
    CHECK(to_json(evaluate_checkpoint(dir / "best.ckpt", data)).dump() ==
          to_json(evaluate_checkpoint(dir / "best.ckpt", data)).dump());
}

TEST_CASE("checkpoint bytes round-trip exactly") {
    TrainConfig c = tiny_train_config();
    c.epochs = 2;
    auto result = train(c, tiny_data(c));
    auto bytes = encode_checkpoint(result.model, c.seed);
    HyperTransformer loaded = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(loaded, c.seed) == bytes);
    CHECK(loaded.config().bands == 3);

    // Loaded values are exactly the f32 roundings of the trained doubles.
    auto trained = result.model.store().parameters(), back = loaded.store().parameters();
    REQUIRE(trained.size() == back.size());
    for (std::size_t i = 0; i < trained.size(); ++i) {
        for (std::size_t k = 0; k < trained[i].value.numel(); ++k) {
            CHECK(back[i].value.data()[k] == static_cast<double>(static_cast<float>(trained[i].value.data()[k])));
        }
    }
    auto stats_a = result.model.store().buffers(), stats_b = loaded.store().buffers();
    REQUIRE(stats_a.size() == stats_b.size());
    CHECK(stats_a.size() == 3);

    auto dir = temp_dir("ckpt");
    save_checkpoint(dir / "m.ckpt", loaded, c.seed);
    CHECK(io::read_file(dir / "m.ckpt") == bytes);
}

TEST_CASE("checkpoint and configuration errors") {
    TrainConfig c = tiny_train_config();
    c.epochs = 1;
    auto result = train(c, tiny_data(c));
    auto bytes = encode_checkpoint(result.model, c.seed);

    SUBCASE("bad magic and truncation are format errors") {
        auto bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
        auto cut = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
        CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
    }
    SUBCASE("a tensor that does not match the described model is a contract error") {
        auto file = decode_parameter_file(bytes);
        file.config["model"]["channels"] = {2, 3, 5};
        CHECK_THROWS_AS(decode_checkpoint(encode_parameter_file(file)), ContractError);
    }
    SUBCASE("evaluating on data of another geometry is a contract error") {
        auto wrong = synth_dataset(1, 1, 4, 8, 8);
        CHECK_THROWS_AS(evaluate(result.model, wrong), ContractError);
    }
    SUBCASE("invalid training configurations") {
        TrainConfig bad = c;
        bad.epochs = 0;
        CHECK_THROWS_AS(train(bad, tiny_data(c)), ContractError);
        bad = c;
        bad.weights.t_per = -1;
        CHECK_THROWS_AS(train(bad, tiny_data(c)), ContractError);
        CHECK_THROWS_AS(nlohmann::json({{"epochs", 3}, {"bogus", 1}}).get<TrainConfig>(), ContractError);
    }
}

TEST_CASE("train config JSON round trip") {
    TrainConfig c = tiny_train_config();
    c.weights = {1.0, 0.0, 0.5};
    c.responses = RgbResponses{SpectralResponse{0, 1.0}, SpectralResponse{1, 1.0}, SpectralResponse{2, 0.5}};
    nlohmann::json j = c;
    TrainConfig back = j.get<TrainConfig>();
    CHECK(nlohmann::json(back) == j);
    CHECK(config_hash(j) == config_hash(nlohmann::json(back)));
    CHECK(config_hash(j) != config_hash(nlohmann::json(tiny_train_config())));
}

TEST_CASE("non-finite loss aborts and keeps earlier checkpoints") {
    TrainConfig c = tiny_train_config();
    c.checkpoint_every = 1;
    auto data = tiny_data(c, 1);
    auto dir = temp_dir("abort");
    TrainOptions opts;
    opts.out_dir = dir;
    // Corrupt the reference after the first epoch (tensors share storage).
    opts.on_epoch = [&](const EpochRecord&) { data[0].x_ref.data.mutable_data()[0] = std::nan(""); };
    CHECK_THROWS_WITH_AS(train(c, data, opts), doctest::Contains("epoch 2"), TrainingError);
    CHECK(std::filesystem::exists(dir / "epoch_0001.ckpt"));
    CHECK_FALSE(std::filesystem::exists(dir / "epoch_0002.ckpt"));
    CHECK_NOTHROW(load_checkpoint(dir / "epoch_0001.ckpt"));
}

TEST_CASE("evaluation baselines and ideal values") {
    TrainConfig c = tiny_train_config();
    auto data = tiny_data(c, 3);
    auto bic = evaluate_bicubic(data);
    std::vector<MetricsReport> each;
    for (const auto& s : data) each.push_back(compute_metrics(bicubic_resample(s.lr.data, ScaleFactor::up(4)), s.x_ref.data));
    CHECK(to_json(bic).dump() == to_json(average(each)).dump());
    auto self = compute_metrics(data[0].x_ref.data, data[0].x_ref.data);
    CHECK(self.cc == 1.0);
    CHECK(self.psnr_db == std::numeric_limits<double>::infinity());
}

TEST_CASE("perceptual-net weight file") {
    const auto dir = temp_dir("perceptual");
    const PerceptualNet net(77);
    save_perceptual_net(dir / "p.ckpt", net);
    const PerceptualNet loaded = load_perceptual_net(dir / "p.ckpt", 2);
    REQUIRE(loaded.layers().size() == net.layers().size());
    CHECK(loaded.tap() == 2);
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const auto& a = net.layers()[i].weight;
        const auto& b = loaded.layers()[i].weight;
        REQUIRE(a.shape() == b.shape());
        for (std::size_t k = 0; k < a.numel(); ++k) CHECK(b.data()[k] == static_cast<float>(a.data()[k]));
        CHECK_FALSE(b.requires_grad());
    }

    SUBCASE("training uses the file and records it") {
        TrainConfig c = tiny_train_config();
        c.epochs = 2;
        const auto data = tiny_data(c);
        const auto baseline = train(c, data);
        c.perceptual_weights = (dir / "p.ckpt").string();
        const auto a = train(c, data), b = train(c, data);
        CHECK(to_json(a.manifest).dump() == to_json(b.manifest).dump());
        CHECK(a.manifest.config.at("perceptual_weights") == c.perceptual_weights.value());
        // A different frozen net gives a different perceptual term.
        CHECK(a.manifest.trace[0].vgg_per != baseline.manifest.trace[0].vgg_per);
        CHECK(nlohmann::json(c).get<TrainConfig>().perceptual_weights == c.perceptual_weights);
    }
    SUBCASE("a model checkpoint is not a perceptual-net file") {
        save_checkpoint(dir / "m.ckpt", HyperTransformer(tiny_train_config().model, 1), 1);
        CHECK_THROWS_AS(load_perceptual_net(dir / "m.ckpt", 3), FormatError);
        CHECK_THROWS_AS(load_perceptual_net(dir / "p.ckpt", 6), ContractError);
    }
}
