#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <iostream>

#include "cli.hpp"
#include "hyperpan/checkpoint.hpp"
#include "hyperpan/cube_io.hpp"
#include "hyperpan/errors.hpp"
#include "hyperpan/metrics.hpp"
#include "hyperpan/trainer.hpp"

namespace py = pybind11;
using namespace hyperpan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a, std::size_t rank, const char* what) {
    if (static_cast<std::size_t>(a.ndim()) != rank) {
        throw DimensionError(std::string(what) + ": expected a " + std::to_string(rank) + "-D array, got " +
                             std::to_string(a.ndim()) + "-D");
    }
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Tensor cube(const Array& a) { return to_tensor(a, 3, "cube"); }

std::string metrics_json(const MetricsReport& r) { return to_json(r).dump(); }

py::dict sample_dict(const Sample& s) {
    py::dict d;
    d["x_ref"] = to_array(s.x_ref.data);
    d["pan"] = to_array(s.pan.data);
    d["lr"] = to_array(s.lr.data);
    return d;
}

std::vector<Sample> samples_from(const py::list& items) {
    std::vector<Sample> out;
    for (const auto& item : items) {
        auto d = item.cast<py::dict>();
        out.push_back(Sample{HsiCube(cube(d["x_ref"].cast<Array>())), PanImage(cube(d["pan"].cast<Array>())),
                             HsiCube(cube(d["lr"].cast<Array>()))});
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "HyperTransformer pansharpening core (C++); see the hyperpan package for the Python API";

    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<DegenerateError>(m, "DegenerateError", PyExc_ArithmeticError);
    py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

    // Image pipeline
    m.def("load_cube", [](const std::filesystem::path& p) { return to_array(load_cube(p).data); }, py::arg("path"));
    m.def(
        "save_cube",
        [](const std::filesystem::path& p, const Array& a, const std::string& dtype) {
            save_cube(p, HsiCube(cube(a)), dtype == "f32" ? CubeDtype::F32 : CubeDtype::F64);
        },
        py::arg("path"), py::arg("cube"), py::arg("dtype") = "f64");
    m.def(
        "walds_degrade",
        [](const Array& a, double sigma, std::size_t scale) {
            return to_array(walds_degrade(cube(a), DegradeOptions{scale, sigma, 8}));
        },
        py::arg("cube"), py::arg("sigma") = 2.0, py::arg("scale") = 4);
    m.def(
        "bicubic_resample",
        [](const Array& a, std::size_t num, std::size_t den) { return to_array(bicubic_resample(cube(a), {num, den})); },
        py::arg("cube"), py::arg("num"), py::arg("den") = 1);
    m.def(
        "synthesize_pan", [](const Array& a) { return to_array(synthesize_pan(HsiCube(cube(a))).data); },
        py::arg("cube"));
    m.def(
        "synth_dataset",
        [](std::uint64_t seed, std::size_t n, std::size_t bands, std::size_t h, std::size_t w) {
            py::list out;
            for (const auto& s : synth_dataset(seed, n, bands, h, w)) out.append(sample_dict(s));
            return out;
        },
        py::arg("seed"), py::arg("patches"), py::arg("bands"), py::arg("height"), py::arg("width"));

    // Metrics
    m.def("cc", [](const Array& x, const Array& r) { return cc(cube(x), cube(r)); });
    m.def("sam", [](const Array& x, const Array& r) { return sam(cube(x), cube(r)); });
    m.def("rmse", [](const Array& x, const Array& r) { return rmse(cube(x), cube(r)); });
    m.def("psnr", [](const Array& x, const Array& r) { return psnr(cube(x), cube(r)); });
    m.def(
        "ergas", [](const Array& x, const Array& r, double ratio) { return ergas(cube(x), cube(r), ratio); },
        py::arg("x"), py::arg("x_ref"), py::arg("ratio") = 4.0);
    m.def("mae_per_band", [](const Array& x, const Array& r) { return mae_per_band(cube(x), cube(r)); });
    m.def("metrics_json", [](const Array& x, const Array& r) { return metrics_json(compute_metrics(cube(x), cube(r))); });

    // Model
    py::class_<HyperTransformer>(m, "HyperTransformer")
        .def(py::init([](const std::string& config_json, std::uint64_t seed) {
                 return HyperTransformer(nlohmann::json::parse(config_json).get<ModelConfig>(), seed);
             }),
             py::arg("config_json"), py::arg("seed") = 0)
        .def("config_json", [](const HyperTransformer& t) { return nlohmann::json(t.config()).dump(); })
        .def("parameter_count", [](const HyperTransformer& t) { return t.store().parameter_count(); })
        .def(
            "forward",
            [](const HyperTransformer& t, const Array& lr, const Array& pan, bool training) {
                Tensor y = cube(lr), p = cube(pan), x;
                {
                    py::gil_scoped_release release;
                    NoGradGuard no_grad;
                    x = t.forward(y, p, training).x;
                }
                return to_array(x);
            },
            py::arg("lr"), py::arg("pan"), py::arg("training") = false)
        .def(
            "save",
            [](const HyperTransformer& t, const std::filesystem::path& p, std::uint64_t seed) {
                save_checkpoint(p, t, seed);
            },
            py::arg("path"), py::arg("seed") = 0);
    m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p); }, py::arg("path"));

    // Training and evaluation
    m.def(
        "train",
        [](const std::string& config_json, const py::list& data, std::optional<std::filesystem::path> out_dir) {
            const TrainConfig cfg = nlohmann::json::parse(config_json).get<TrainConfig>();
            const std::vector<Sample> samples = samples_from(data);
            TrainOptions opts;
            opts.out_dir = std::move(out_dir);
            py::gil_scoped_release release;
            TrainResult r = train(cfg, samples, opts);
            std::string manifest = to_json(r.manifest).dump();
            return std::make_pair(std::move(r.model), std::move(manifest));
        },
        py::arg("config_json"), py::arg("data"), py::arg("out_dir") = std::nullopt);
    m.def(
        "evaluate",
        [](const HyperTransformer& t, const py::list& data) { return metrics_json(evaluate(t, samples_from(data))); },
        py::arg("model"), py::arg("data"));
    m.def(
        "evaluate_bicubic", [](const py::list& data) { return metrics_json(evaluate_bicubic(samples_from(data))); },
        py::arg("data"));

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) { return cli::run(args, std::cout, std::cerr); },
        py::arg("args"), "Run the hyperpan command-line tool in-process; returns the exit code");
    m.def("source_hash", &source_hash);
}
