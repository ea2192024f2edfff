#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "hyperpan/binary_io.hpp"
#include "hyperpan/cube_io.hpp"
#include "hyperpan/metrics.hpp"
#include "hyperpan/render.hpp"
#include "json.hpp"

using namespace hyperpan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run hp(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("hyperpan_test_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string s(const fs::path& p) { return p.string(); }

/// A small dataset and a briefly trained checkpoint shared by several cases.
struct Fixture {
    fs::path root, data, run;
    Fixture() {
        root = fresh_dir("fixture");
        data = root / "data";
        run = root / "run";
        REQUIRE(hp({"synth", "--out-dir", s(data), "--patches", "2", "--bands", "4", "--size", "16", "--seed", "9"}).code == 0);
        std::ofstream(root / "cfg.json") << R"({"model": {"bands": 4, "hr_height": 16, "hr_width": 16,
            "channels": [4, 4, 8], "heads": 2, "window": 8, "res_blocks": [1, 1, 1]},
            "epochs": 2, "checkpoint_every": 1, "seed": 5})";
        REQUIRE(hp({"train", "--config", s(root / "cfg.json"), "--data-dir", s(data), "--out-dir", s(run), "--quiet"}).code == 0);
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

}  // namespace

TEST_CASE("usage errors exit with 2 and print usage") {
    auto r = hp({});
    CHECK(r.code == 2);
    r = hp({"train", "--data-dir", ".", "--out-dir", "x"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--config") != std::string::npos);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(hp({"frobnicate"}).code == 2);
    CHECK(hp({"eval", "--data-dir", "."}).code == 2);
    CHECK(hp({"--help"}).code == 0);
}

TEST_CASE("degrade: LR is a quarter of the reference, deterministic, constant in constant out") {
    auto dir = fresh_dir("degrade");
    save_cube(dir / "const.hsi", HsiCube(Tensor::full({3, 16, 16}, 0.375)));
    for (const char* tag : {"a", "b"}) {
        auto r = hp({"degrade", "--in", s(dir / "const.hsi"), "--out-lr", s(dir / (std::string(tag) + "_lr.hsi")),
                     "--out-pan", s(dir / (std::string(tag) + "_pan.hsi"))});
        REQUIRE(r.code == 0);
    }
    CHECK(io::read_file(dir / "a_lr.hsi") == io::read_file(dir / "b_lr.hsi"));
    CHECK(io::read_file(dir / "a_pan.hsi") == io::read_file(dir / "b_pan.hsi"));
    auto ma = json::parse(io::read_file(dir / "a_lr.hsi.manifest.json"));
    auto mb = json::parse(io::read_file(dir / "b_lr.hsi.manifest.json"));
    ma.erase("outputs");
    mb.erase("outputs");
    CHECK(ma == mb);
    auto lr = load_cube(dir / "a_lr.hsi");
    auto pan = load_pan(dir / "a_pan.hsi");
    CHECK(lr.data.shape() == Shape{3, 4, 4});
    CHECK(pan.data.shape() == Shape{1, 16, 16});
    for (double v : lr.data.data()) CHECK(v == doctest::Approx(0.375).epsilon(1e-14));
    for (double v : pan.data.data()) CHECK(v == 0.375);

    auto missing = hp({"degrade", "--in", s(dir / "nope.hsi"), "--out-lr", "x", "--out-pan", "y"});
    CHECK(missing.code == 2);
    std::ofstream(dir / "junk.hsi") << "not a cube";
    auto bad = hp({"degrade", "--in", s(dir / "junk.hsi"), "--out-lr", s(dir / "j_lr.hsi"), "--out-pan", s(dir / "j_pan.hsi")});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("magic") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "j_lr.hsi"));
}

TEST_CASE("train writes checkpoints and a manifest echoing the effective config") {
    const auto& f = fixture();
    for (auto name : {"epoch_0001.ckpt", "epoch_0002.ckpt", "best.ckpt", "final.ckpt", "manifest.json"}) {
        CHECK(fs::exists(f.run / name));
    }
    auto m = json::parse(io::read_file(f.run / "manifest.json"));
    CHECK(m["config"]["epochs"] == 2);
    CHECK(m["dataset"]["patches"] == 2);
    CHECK(m["loss_trace"].size() == 2);

    auto run2 = f.root / "run2";
    REQUIRE(hp({"train", "--config", s(f.root / "cfg.json"), "--data-dir", s(f.data), "--out-dir", s(run2), "--quiet"}).code == 0);
    CHECK(io::read_file(run2 / "manifest.json") == io::read_file(f.run / "manifest.json"));
    CHECK(io::read_file(run2 / "final.ckpt") == io::read_file(f.run / "final.ckpt"));

    SUBCASE("ablation overrides") {
        auto run3 = f.root / "run3";
        REQUIRE(hp({"train", "--config", s(f.root / "cfg.json"), "--data-dir", s(f.data), "--out-dir", s(run3), "--quiet",
                    "--scales", "4", "--bypass-attention", "--heads", "4", "--lambda-vgg", "0", "--epochs", "1"})
                    .code == 0);
        auto cfg = json::parse(io::read_file(run3 / "manifest.json"))["config"];
        CHECK(cfg["model"]["scales_enabled"] == json::array({true, false, false}));
        CHECK(cfg["model"]["attention_bypass"] == true);
        CHECK(cfg["model"]["heads"] == 4);
        CHECK(cfg["loss_weights"]["vgg_per"] == 0.0);
        CHECK(cfg["epochs"] == 1);
        CHECK(hp({"train", "--config", s(f.root / "cfg.json"), "--data-dir", s(f.data), "--out-dir", s(run3), "--scales", "3"})
                  .code == 2);
    }
}

TEST_CASE("eval: repeatable JSON, identity ideal values, bicubic baseline") {
    const auto& f = fixture();
    auto a = hp({"eval", "--checkpoint", s(f.run / "final.ckpt"), "--data-dir", s(f.data)});
    auto b = hp({"eval", "--checkpoint", s(f.run / "final.ckpt"), "--data-dir", s(f.data), "--out", s(f.root / "eval.json")});
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(io::read_file(f.root / "eval.json") == std::vector<std::uint8_t>(b.out.begin(), b.out.end()));
    auto report = json::parse(a.out);
    CHECK(report["mode"] == "model");
    CHECK(report["metrics"]["mae_per_band"].size() == 4);

    auto ideal = json::parse(hp({"eval", "--identity", "--data-dir", s(f.data)}).out)["metrics"];
    CHECK(ideal["cc"] == 1.0);
    CHECK(ideal["sam_degrees"] == 0.0);
    CHECK(ideal["rmse"] == 0.0);
    CHECK(ideal["ergas"] == 0.0);
    CHECK(ideal["psnr_db"] == "inf");

    auto bic = json::parse(hp({"eval", "--bicubic", "--data-dir", s(f.data)}).out);
    CHECK(bic["mode"] == "bicubic");
    CHECK(bic["metrics"]["psnr_db"].get<double>() > 10.0);

    auto wrong = fresh_dir("eval_wrong");
    REQUIRE(hp({"synth", "--out-dir", s(wrong), "--patches", "1", "--bands", "5", "--size", "16"}).code == 0);
    auto mismatch = hp({"eval", "--checkpoint", s(f.run / "final.ckpt"), "--data-dir", s(wrong)});
    CHECK(mismatch.code == 1);
    CHECK(mismatch.err.find("does not fit") != std::string::npos);
}

TEST_CASE("sharpen: 4x output, deterministic, loadable, no partial output on error") {
    const auto& f = fixture();
    for (const char* out : {"hr_a.hsi", "hr_b.hsi"}) {
        REQUIRE(hp({"sharpen", "--checkpoint", s(f.run / "final.ckpt"), "--lr-cube", s(f.data / "0000_lr.hsi"), "--pan",
                    s(f.data / "0000_pan.hsi"), "--out", s(f.root / out)})
                    .code == 0);
    }
    CHECK(io::read_file(f.root / "hr_a.hsi") == io::read_file(f.root / "hr_b.hsi"));
    auto hr = load_cube(f.root / "hr_a.hsi");
    auto lr = load_cube(f.data / "0000_lr.hsi");
    CHECK(hr.height() == 4 * lr.height());
    CHECK(hr.width() == 4 * lr.width());
    CHECK(hr.bands() == lr.bands());

    auto bad = hp({"sharpen", "--checkpoint", s(f.run / "final.ckpt"), "--lr-cube", s(f.data / "0000_ref.hsi"), "--pan",
                   s(f.data / "0000_pan.hsi"), "--out", s(f.root / "hr_bad.hsi")});
    CHECK(bad.code == 1);
    CHECK_FALSE(fs::exists(f.root / "hr_bad.hsi"));
}

TEST_CASE("plot: CSV matches mae_per_band, zero map for identical cubes, valid PNGs") {
    const auto& f = fixture();
    auto out = f.root / "plot_same";
    REQUIRE(hp({"plot", "--pred", s(f.data / "0000_ref.hsi"), "--ref", s(f.data / "0000_ref.hsi"), "--out-dir", s(out)}).code == 0);
    auto csv = io::read_file(out / "mae_per_band.csv");
    std::istringstream lines(std::string(csv.begin(), csv.end()));
    std::string line;
    std::getline(lines, line);
    CHECK(line == "band,mae");
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        CHECK(line.substr(line.find(',') + 1) == "0");
        ++rows;
    }
    CHECK(rows == 4);

    REQUIRE(hp({"sharpen", "--checkpoint", s(f.run / "final.ckpt"), "--lr-cube", s(f.data / "0001_lr.hsi"), "--pan",
                s(f.data / "0001_pan.hsi"), "--out", s(f.root / "hr1.hsi")})
                .code == 0);
    auto out2 = f.root / "plot_pred";
    REQUIRE(hp({"plot", "--pred", s(f.root / "hr1.hsi"), "--ref", s(f.data / "0001_ref.hsi"), "--out-dir", s(out2)}).code == 0);
    const auto want = mae_per_band(load_cube(f.root / "hr1.hsi").data, load_cube(f.data / "0001_ref.hsi").data);
    auto csv2 = io::read_file(out2 / "mae_per_band.csv");
    std::istringstream lines2(std::string(csv2.begin(), csv2.end()));
    std::getline(lines2, line);
    for (std::size_t b = 0; b < want.size(); ++b) {
        REQUIRE(std::getline(lines2, line));
        CHECK(std::abs(std::stod(line.substr(line.find(',') + 1)) - want[b]) < 1e-12);
    }

    // Decode the zero-error heat map: every pixel is the bottom of the colormap.
    auto png = io::read_file(out / "mae_map.png");
    REQUIRE(png.size() > 33);
    CHECK(std::vector<std::uint8_t>(png.begin(), png.begin() + 8) ==
          std::vector<std::uint8_t>{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a});
    CHECK(be32(png, 16) == 16);
    CHECK(be32(png, 20) == 16);
    std::vector<std::uint8_t> idat;
    for (std::size_t at = 8; at < png.size();) {
        const std::uint32_t len = be32(png, at);
        const std::string type(png.begin() + static_cast<long>(at + 4), png.begin() + static_cast<long>(at + 8));
        const uLong crc = crc32(0L, png.data() + at + 4, len + 4);
        CHECK(be32(png, at + 8 + len) == static_cast<std::uint32_t>(crc));
        if (type == "IDAT") idat.insert(idat.end(), png.begin() + static_cast<long>(at + 8), png.begin() + static_cast<long>(at + 8 + len));
        at += 12 + len;
    }
    std::vector<std::uint8_t> raw(16 * (1 + 16 * 3));
    uLongf raw_len = raw.size();
    REQUIRE(uncompress(raw.data(), &raw_len, idat.data(), idat.size()) == Z_OK);
    CHECK(raw_len == raw.size());
    const auto bottom = viridis(0.0);
    for (std::size_t y = 0; y < 16; ++y) {
        CHECK(raw[y * 49] == 0);
        for (std::size_t x = 0; x < 16; ++x)
            for (std::size_t c = 0; c < 3; ++c) CHECK(raw[y * 49 + 1 + x * 3 + c] == bottom[c]);
    }
    CHECK(fs::exists(out / "rgb_pred.png"));
    CHECK(fs::exists(out / "manifest.json"));
}

TEST_CASE("render helpers") {
    CHECK(viridis(-1.0) == viridis(0.0));
    CHECK(viridis(2.0) == viridis(1.0));
    CHECK(viridis(1.0) == std::array<std::uint8_t, 3>{253, 231, 37});
    Tensor x({2, 1, 2}, {0.0, 1.0, 0.5, 0.5}), r = Tensor::zeros({2, 1, 2});
    auto m = mae_map(x, r);
    CHECK(m == std::vector<double>{0.25, 0.75});
    CHECK_THROWS(encode_png(RgbImage{2, 2, std::vector<std::uint8_t>(5)}));
}
