#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "hyperpan/binary_io.hpp"
#include "hyperpan/checkpoint.hpp"
#include "hyperpan/cube_io.hpp"
#include "hyperpan/errors.hpp"
#include "hyperpan/metrics.hpp"
#include "hyperpan/render.hpp"
#include "hyperpan/trainer.hpp"

namespace hyperpan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fnv_hex(const std::vector<std::uint8_t>& bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_hash(const fs::path& p) { return fnv_hex(io::read_file(p)); }

/// Manifest for the single-shot subcommands: what ran, on what, producing what.
json run_manifest(const std::string& command, const json& arguments, const json& inputs, const json& outputs) {
    return {{"command", command},
            {"arguments", arguments},
            {"config_hash", config_hash(arguments)},
            {"source_hash", source_hash()},
            {"inputs", inputs},
            {"outputs", outputs}};
}

void write_json(const fs::path& p, const json& j) { io::write_text_atomic(p, j.dump(2) + "\n"); }

fs::path sidecar(const fs::path& p) { return fs::path(p.string() + ".manifest.json"); }

CubeDtype parse_dtype(const std::string& s) { return s == "f32" ? CubeDtype::F32 : CubeDtype::F64; }

/// "4,2,1" style list of scale tags -> enable flags in scale-index order.
std::array<bool, kScales> parse_scales(const std::string& spec) {
    std::array<bool, kScales> on{false, false, false};
    if (spec == "none") return on;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto it = std::find(kScaleTags.begin(), kScaleTags.end(), static_cast<std::size_t>(std::stoul(item)));
        if (it == kScaleTags.end()) throw CLI::ValidationError("--scales", "scale tags are 4, 2 and 1; got " + item);
        on[static_cast<std::size_t>(it - kScaleTags.begin())] = true;
    }
    return on;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    fs::path out_dir;
    std::uint64_t seed = 0;
    std::size_t patches = 8, bands = 8, size = 64;
    double sigma = 2.0;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
    DegradeOptions opts;
    opts.sigma = a.sigma;
    const auto data = synth_dataset(a.seed, a.patches, a.bands, a.size, a.size, opts);
    fs::create_directories(a.out_dir);
    json files = json::array();
    for (std::size_t i = 0; i < data.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "%04zu", i);
        save_cube(a.out_dir / (std::string(stem) + "_ref.hsi"), data[i].x_ref);
        save_cube(a.out_dir / (std::string(stem) + "_lr.hsi"), data[i].lr);
        save_cube(a.out_dir / (std::string(stem) + "_pan.hsi"), data[i].pan);
        files.push_back(stem);
    }
    const json args{{"seed", a.seed}, {"patches", a.patches}, {"bands", a.bands}, {"size", a.size}, {"sigma", a.sigma}};
    write_json(a.out_dir / "manifest.json", run_manifest("synth", args, json::array(), files));
    out << "wrote " << data.size() << " patches to " << a.out_dir.string() << "\n";
}

struct DegradeArgs {
    fs::path in, out_lr, out_pan;
    double sigma = 2.0;
    std::size_t scale = 4, kernel = 8, pan_lo = 0, pan_hi = 0;
    std::string dtype = "f64";
};

void cmd_degrade(const DegradeArgs& a, std::ostream& out) {
    const HsiCube x_ref = normalize_unit(load_cube(a.in));
    DegradeOptions opts{a.scale, a.sigma, a.kernel};
    const HsiCube lr = walds_degrade(x_ref, opts);
    const PanImage pan = synthesize_pan(x_ref, a.pan_lo, a.pan_hi);
    save_cube(a.out_lr, lr, parse_dtype(a.dtype));
    save_cube(a.out_pan, pan, parse_dtype(a.dtype));
    const json args{{"sigma", a.sigma}, {"scale", a.scale},   {"kernel_size", a.kernel},
                    {"pan_band_lo", a.pan_lo}, {"pan_band_hi", a.pan_hi}, {"dtype", a.dtype}};
    write_json(sidecar(a.out_lr), run_manifest("degrade", args, {{{"path", a.in.string()}, {"hash", file_hash(a.in)}}},
                                               {a.out_lr.string(), a.out_pan.string()}));
    out << "LR " << shape_str(lr.data.shape()) << " -> " << a.out_lr.string() << "\nPAN "
        << shape_str(pan.data.shape()) << " -> " << a.out_pan.string() << "\n";
}

struct TrainArgs {
    fs::path config, data_dir, out_dir, eval_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, heads, checkpoint_every;
    std::optional<double> lr, beta, lambda_rec, lambda_vgg, lambda_t;
    std::optional<std::string> scales;
    bool bypass = false, quiet = false;
};

json describe_data(const fs::path& dir, const DataDir& d) {
    std::vector<std::uint8_t> all;
    for (const auto& stem : d.stems) {
        for (const char* kind : {"_ref.hsi", "_lr.hsi", "_pan.hsi"}) {
            const auto bytes = io::read_file(dir / (stem + kind));
            all.insert(all.end(), bytes.begin(), bytes.end());
        }
    }
    return {{"data_dir", dir.string()}, {"patches", d.stems.size()}, {"stems", d.stems}, {"content_hash", fnv_hex(all)}};
}

void cmd_train(const TrainArgs& a, std::ostream& out) {
    TrainConfig cfg = json::parse(io::read_file(a.config)).get<TrainConfig>();
    if (a.seed) cfg.seed = *a.seed;
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.checkpoint_every) cfg.checkpoint_every = *a.checkpoint_every;
    if (a.heads) cfg.model.heads = *a.heads;
    if (a.lr) cfg.adam.learning_rate = *a.lr;
    if (a.beta) cfg.model.beta = *a.beta;
    if (a.lambda_rec) cfg.weights.rec = *a.lambda_rec;
    if (a.lambda_vgg) cfg.weights.vgg_per = *a.lambda_vgg;
    if (a.lambda_t) cfg.weights.t_per = *a.lambda_t;
    if (a.scales) cfg.model.scales_enabled = parse_scales(*a.scales);
    if (a.bypass) cfg.model.attention_bypass = true;

    const DataDir data = load_data_dir(a.data_dir);
    TrainOptions opts;
    opts.out_dir = a.out_dir;
    opts.dataset = describe_data(a.data_dir, data);
    if (!a.eval_dir.empty()) {
        const DataDir eval = load_data_dir(a.eval_dir);
        opts.eval_set = eval.samples;
        opts.dataset["eval"] = describe_data(a.eval_dir, eval);
    }
    if (!a.quiet) {
        opts.on_epoch = [&out](const EpochRecord& r) {
            out << "epoch " << r.epoch << " loss " << r.loss << "\n" << std::flush;
        };
    }
    const TrainResult result = train(cfg, data.samples, opts);
    const auto& m = result.manifest;
    out << "best epoch " << m.best_epoch << " psnr " << m.best_psnr << " dB; final psnr "
        << m.final_metrics.psnr_db << " dB; manifest " << (a.out_dir / "manifest.json").string() << "\n";
}

struct EvalArgs {
    fs::path checkpoint, data_dir, out;
    bool bicubic = false, identity = false;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
    const DataDir data = load_data_dir(a.data_dir);
    json report{{"data", describe_data(a.data_dir, data)}, {"source_hash", source_hash()}};
    if (a.identity) {
        std::vector<MetricsReport> each;
        for (const auto& s : data.samples) each.push_back(compute_metrics(s.x_ref.data, s.x_ref.data));
        report["mode"] = "identity";
        report["metrics"] = to_json(average(each));
    } else if (a.bicubic) {
        report["mode"] = "bicubic";
        report["metrics"] = to_json(evaluate_bicubic(data.samples));
    } else {
        const auto bytes = io::read_file(a.checkpoint);
        const ParameterFile header = decode_parameter_file(bytes);
        const HyperTransformer model = decode_checkpoint(bytes);
        report["mode"] = "model";
        report["checkpoint"] = {{"path", a.checkpoint.string()}, {"hash", fnv_hex(bytes)}};
        report["config_hash"] = config_hash(header.config);
        report["seed"] = header.config.value("seed", std::uint64_t{0});
        report["metrics"] = to_json(evaluate(model, data.samples));
    }
    const std::string text = report.dump(2) + "\n";
    if (!a.out.empty()) io::write_text_atomic(a.out, text);
    out << text;
}

struct SharpenArgs {
    fs::path checkpoint, lr_cube, pan, out;
    std::string dtype = "f64";
};

void cmd_sharpen(const SharpenArgs& a, std::ostream& out) {
    const auto bytes = io::read_file(a.checkpoint);
    const HyperTransformer model = decode_checkpoint(bytes);
    const HsiCube lr = load_cube(a.lr_cube);
    const PanImage pan = load_pan(a.pan);
    const auto& c = model.config();
    if (lr.data.shape() != Shape{c.bands, c.lr_height(), c.lr_width()} ||
        pan.data.shape() != Shape{1, c.hr_height, c.hr_width}) {
        throw ContractError("sharpen: LR " + shape_str(lr.data.shape()) + " and PAN " + shape_str(pan.data.shape()) +
                            " do not fit the checkpoint's " + std::to_string(c.bands) + "-band " +
                            std::to_string(c.hr_height) + "x" + std::to_string(c.hr_width) + " model");
    }
    Tensor x;
    {
        NoGradGuard no_grad;
        x = model.forward(lr.data, pan.data, /*training=*/false).x;
    }
    save_cube(a.out, HsiCube(x), parse_dtype(a.dtype));
    const json inputs = {{{"path", a.checkpoint.string()}, {"hash", fnv_hex(bytes)}},
                         {{"path", a.lr_cube.string()}, {"hash", file_hash(a.lr_cube)}},
                         {{"path", a.pan.string()}, {"hash", file_hash(a.pan)}}};
    write_json(sidecar(a.out), run_manifest("sharpen", {{"dtype", a.dtype}}, inputs, {a.out.string()}));
    out << "HR " << shape_str(x.shape()) << " -> " << a.out.string() << "\n";
}

struct PlotArgs {
    fs::path pred, ref, out_dir;
    double mae_max = 0.1;
};

void cmd_plot(const PlotArgs& a, std::ostream& out) {
    const HsiCube pred = load_cube(a.pred), ref = load_cube(a.ref);
    const auto mae = mae_per_band(pred.data, ref.data);
    const auto map = mae_map(pred.data, ref.data);
    const auto responses = default_responses(ref.bands());
    const RgbImage heat = render_heatmap(map, ref.height(), ref.width(), a.mae_max);
    const RgbImage rgb_pred = render_rgb(pred.data, responses), rgb_ref = render_rgb(ref.data, responses);

    fs::create_directories(a.out_dir);
    std::string csv = "band,mae\n";
    for (std::size_t b = 0; b < mae.size(); ++b) {
        char line[64];
        std::snprintf(line, sizeof line, "%zu,%.17g\n", b, mae[b]);
        csv += line;
    }
    io::write_text_atomic(a.out_dir / "mae_per_band.csv", csv);
    write_png(a.out_dir / "mae_map.png", heat);
    write_png(a.out_dir / "rgb_pred.png", rgb_pred);
    write_png(a.out_dir / "rgb_ref.png", rgb_ref);
    const json inputs = {{{"path", a.pred.string()}, {"hash", file_hash(a.pred)}},
                         {{"path", a.ref.string()}, {"hash", file_hash(a.ref)}}};
    write_json(a.out_dir / "manifest.json",
               run_manifest("plot", {{"mae_max", a.mae_max}}, inputs,
                            {"mae_per_band.csv", "mae_map.png", "rgb_pred.png", "rgb_ref.png"}));
    out << "wrote MAE curve, MAE map and RGB previews to " << a.out_dir.string() << "\n";
}

}  // namespace

DataDir load_data_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + ": not a directory");
    DataDir d;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        constexpr std::string_view suffix = "_ref.hsi";
        if (name.size() > suffix.size() && name.ends_with(suffix)) d.stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(d.stems.begin(), d.stems.end());
    if (d.stems.empty()) throw std::runtime_error(dir.string() + ": no *_ref.hsi patches");
    for (const auto& stem : d.stems) {
        auto need = [&](const std::string& kind) {
            const fs::path p = dir / (stem + kind);
            if (!fs::exists(p)) throw std::runtime_error(p.string() + ": missing (patch '" + stem + "')");
            return p;
        };
        const fs::path ref = need("_ref.hsi"), lr = need("_lr.hsi"), pan = need("_pan.hsi");
        d.samples.push_back(Sample{load_cube(ref), load_pan(pan), load_cube(lr)});
    }
    return d;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"hyperpan: hyperspectral pansharpening with feature soft-attention"};
    app.failure_message(CLI::FailureMessage::help);
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s_synth = app.add_subcommand("synth", "Write a deterministic synthetic dataset (reference, LR, PAN per patch)");
    s_synth->add_option("--out-dir", synth.out_dir, "Output directory")->required();
    s_synth->add_option("--seed", synth.seed, "Dataset seed")->capture_default_str();
    s_synth->add_option("--patches", synth.patches, "Number of patches")->capture_default_str();
    s_synth->add_option("--bands", synth.bands, "Spectral bands")->capture_default_str();
    s_synth->add_option("--size", synth.size, "HR patch side (multiple of 4)")->capture_default_str();
    s_synth->add_option("--sigma", synth.sigma, "Degradation Gaussian sigma")->capture_default_str();

    DegradeArgs degrade;
    auto* s_degrade = app.add_subcommand("degrade", "Simulate LR-HSI and PAN from a reference cube (Wald protocol)");
    s_degrade->add_option("--in", degrade.in, "Reference cube")->required()->check(CLI::ExistingFile);
    s_degrade->add_option("--out-lr", degrade.out_lr, "LR cube output")->required();
    s_degrade->add_option("--out-pan", degrade.out_pan, "PAN output")->required();
    s_degrade->add_option("--sigma", degrade.sigma, "Gaussian sigma of the 8x8 blur")->capture_default_str();
    s_degrade->add_option("--scale", degrade.scale, "Decimation factor")->capture_default_str();
    s_degrade->add_option("--kernel-size", degrade.kernel, "Blur support")->capture_default_str();
    s_degrade->add_option("--pan-band-lo", degrade.pan_lo, "First band averaged into the PAN");
    s_degrade->add_option("--pan-band-hi", degrade.pan_hi, "One past the last PAN band (0 = all)");
    s_degrade->add_option("--dtype", degrade.dtype, "Output scalar type")->check(CLI::IsMember({"f32", "f64"}));

    TrainArgs tr;
    auto* s_train = app.add_subcommand("train", "Train a model; writes checkpoints and manifest.json");
    s_train->add_option("--config", tr.config, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
    s_train->add_option("--data-dir", tr.data_dir, "Training patches")->required()->check(CLI::ExistingDirectory);
    s_train->add_option("--out-dir", tr.out_dir, "Checkpoint and manifest directory")->required();
    s_train->add_option("--eval-dir", tr.eval_dir, "Patches for best-checkpoint selection (default: training set)")
        ->check(CLI::ExistingDirectory);
    s_train->add_option("--seed", tr.seed, "Override: seed");
    s_train->add_option("--epochs", tr.epochs, "Override: epochs");
    s_train->add_option("--checkpoint-every", tr.checkpoint_every, "Override: checkpoint cadence in epochs");
    s_train->add_option("--lr", tr.lr, "Override: Adam learning rate");
    s_train->add_option("--heads", tr.heads, "Override: attention heads N");
    s_train->add_option("--beta", tr.beta, "Override: descriptor reduction ratio");
    s_train->add_option("--scales", tr.scales, "Override: enabled scales, e.g. 4,2,1 or 4 or none");
    s_train->add_option("--lambda-rec", tr.lambda_rec, "Override: reconstruction weight");
    s_train->add_option("--lambda-vgg", tr.lambda_vgg, "Override: perceptual weight");
    s_train->add_option("--lambda-tper", tr.lambda_t, "Override: transfer-perceptual weight");
    s_train->add_flag("--bypass-attention", tr.bypass, "Skip MHFSA: T = V at every enabled scale");
    s_train->add_flag("--quiet", tr.quiet, "No per-epoch progress");

    EvalArgs ev;
    auto* s_eval = app.add_subcommand("eval", "Average metrics over a data directory; JSON on stdout");
    auto* ck = s_eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
    s_eval->add_option("--data-dir", ev.data_dir, "Evaluation patches")->required()->check(CLI::ExistingDirectory);
    s_eval->add_option("--out", ev.out, "Also write the report here");
    auto* bic = s_eval->add_flag("--bicubic", ev.bicubic, "Evaluate the bicubic-upsampling baseline");
    auto* idt = s_eval->add_flag("--identity", ev.identity, "Evaluate the references against themselves");
    ck->excludes(bic)->excludes(idt);
    bic->excludes(idt);

    SharpenArgs sh;
    auto* s_sharpen = app.add_subcommand("sharpen", "Fuse an LR cube and a PAN image into an HR cube");
    s_sharpen->add_option("--checkpoint", sh.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    s_sharpen->add_option("--lr-cube", sh.lr_cube, "LR-HSI cube")->required()->check(CLI::ExistingFile);
    s_sharpen->add_option("--pan", sh.pan, "PAN image (1-band cube)")->required()->check(CLI::ExistingFile);
    s_sharpen->add_option("--out", sh.out, "HR cube output")->required();
    s_sharpen->add_option("--dtype", sh.dtype, "Output scalar type")->check(CLI::IsMember({"f32", "f64"}));

    PlotArgs pl;
    auto* s_plot = app.add_subcommand("plot", "MAE curve (CSV), MAE map and RGB previews (PNG)");
    s_plot->add_option("--pred", pl.pred, "Predicted cube")->required()->check(CLI::ExistingFile);
    s_plot->add_option("--ref", pl.ref, "Reference cube")->required()->check(CLI::ExistingFile);
    s_plot->add_option("--out-dir", pl.out_dir, "Output directory")->required();
    s_plot->add_option("--mae-max", pl.mae_max, "Top of the MAE color scale")->capture_default_str();

    try {
        app.parse(argc, argv);
        if (*s_eval && !ev.bicubic && !ev.identity && ev.checkpoint.empty()) {
            throw CLI::RequiredError("--checkpoint (or --bicubic / --identity)");
        }
        if (*s_train && tr.scales) parse_scales(*tr.scales);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const std::invalid_argument&) {
        err << "error: --scales expects a comma-separated list of 4, 2, 1\n";
        return kExitUsage;
    }

    try {
        if (*s_synth) cmd_synth(synth, out);
        if (*s_degrade) cmd_degrade(degrade, out);
        if (*s_train) cmd_train(tr, out);
        if (*s_eval) cmd_eval(ev, out);
        if (*s_sharpen) cmd_sharpen(sh, out);
        if (*s_plot) cmd_plot(pl, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"hyperpan"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace hyperpan::cli
