#include "hyperpan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "hyperpan/errors.hpp"

namespace hyperpan {

namespace {

struct Geometry {
    std::size_t bands, pixels;
};

Geometry check_pair(const Tensor& x, const Tensor& x_ref, const char* what) {
    if (x.rank() != 3 || x.shape() != x_ref.shape()) {
        throw DimensionError(std::string(what) + ": expected equal [C,H,W] shapes, got " + shape_str(x.shape()) +
                             " and " + shape_str(x_ref.shape()));
    }
    return {x.dim(0), x.dim(1) * x.dim(2)};
}

double squared_error(const Tensor& x, const Tensor& x_ref) {
    auto a = x.data(), b = x_ref.data();
    double se = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        se += d * d;
    }
    return se;
}

}  // namespace

double cc(const Tensor& x, const Tensor& x_ref) {
    const auto [C, n] = check_pair(x, x_ref, "cc");
    auto a = x.data(), b = x_ref.data();
    double total = 0;
    for (std::size_t c = 0; c < C; ++c) {
        const double* pa = a.data() + c * n;
        const double* pb = b.data() + c * n;
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ma += pa[i];
            mb += pb[i];
        }
        ma /= static_cast<double>(n);
        mb /= static_cast<double>(n);
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double da = pa[i] - ma, db = pb[i] - mb;
            sab += da * db;
            saa += da * da;
            sbb += db * db;
        }
        if (saa == 0.0 || sbb == 0.0) {
            throw DegenerateError("cc: band " + std::to_string(c) + " has zero variance in the " +
                                  (sbb == 0.0 ? "reference" : "prediction"));
        }
        total += std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
    }
    return total / static_cast<double>(C);
}

double sam(const Tensor& x, const Tensor& x_ref) {
    const auto [C, n] = check_pair(x, x_ref, "sam");
    auto a = x.data(), b = x_ref.data();
    double total = 0;
    for (std::size_t p = 0; p < n; ++p) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const double va = a[c * n + p], vb = b[c * n + p];
            dot += va * vb;
            na += va * va;
            nb += vb * vb;
        }
        if (na == 0.0 || nb == 0.0) {
            throw DegenerateError("sam: pixel " + std::to_string(p) + " has a zero spectrum in the " +
                                  (nb == 0.0 ? "reference" : "prediction"));
        }
        // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): sqrt(a * a) == a exactly,
        // so identical and power-of-two-scaled spectra give an angle of exactly 0.
        total += std::acos(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
    }
    return total / static_cast<double>(n) * 180.0 / std::numbers::pi;
}

double rmse(const Tensor& x, const Tensor& x_ref) {
    check_pair(x, x_ref, "rmse");
    return std::sqrt(squared_error(x, x_ref) / static_cast<double>(x.numel()));
}

double psnr(const Tensor& x, const Tensor& x_ref) {
    const double e = rmse(x, x_ref);
    if (e == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(1.0 / e);
}

double ergas(const Tensor& x, const Tensor& x_ref, double ratio) {
    const auto [C, n] = check_pair(x, x_ref, "ergas");
    if (!(ratio > 0.0)) throw ContractError("ergas: ratio must be positive");
    auto a = x.data(), b = x_ref.data();
    double acc = 0;
    for (std::size_t c = 0; c < C; ++c) {
        double se = 0, mean = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = a[c * n + i] - b[c * n + i];
            se += d * d;
            mean += b[c * n + i];
        }
        mean /= static_cast<double>(n);
        if (mean == 0.0) throw DegenerateError("ergas: reference band " + std::to_string(c) + " has zero mean");
        const double rel = std::sqrt(se / static_cast<double>(n)) / mean;
        acc += rel * rel;
    }
    return 100.0 / ratio * std::sqrt(acc / static_cast<double>(C));
}

double rsnr(const Tensor& x, const Tensor& x_ref) {
    check_pair(x, x_ref, "rsnr");
    const double err = squared_error(x, x_ref);
    double sig = 0;
    for (double v : x_ref.data()) sig += v * v;
    if (err == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(sig / err);
}

std::vector<double> mae_per_band(const Tensor& x, const Tensor& x_ref) {
    const auto [C, n] = check_pair(x, x_ref, "mae_per_band");
    auto a = x.data(), b = x_ref.data();
    std::vector<double> out(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += std::abs(a[c * n + i] - b[c * n + i]);
        out[c] = s / static_cast<double>(n);
    }
    return out;
}

MetricsReport compute_metrics(const Tensor& x, const Tensor& x_ref, int scale_ratio) {
    MetricsReport r;
    r.cc = cc(x, x_ref);
    r.sam_degrees = sam(x, x_ref);
    r.rmse = rmse(x, x_ref);
    r.ergas = ergas(x, x_ref, scale_ratio);
    r.psnr_db = psnr(x, x_ref);
    r.mae_per_band = mae_per_band(x, x_ref);
    r.scale_ratio = scale_ratio;
    return r;
}

MetricsReport average(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ContractError("average: no reports");
    MetricsReport out;
    out.scale_ratio = reports.front().scale_ratio;
    out.mae_per_band.assign(reports.front().mae_per_band.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(reports.size());
    for (const auto& r : reports) {
        if (r.mae_per_band.size() != out.mae_per_band.size()) throw DimensionError("average: band counts differ");
        out.cc += r.cc * inv;
        out.sam_degrees += r.sam_degrees * inv;
        out.rmse += r.rmse * inv;
        out.ergas += r.ergas * inv;
        out.psnr_db += r.psnr_db * inv;
        for (std::size_t b = 0; b < r.mae_per_band.size(); ++b) out.mae_per_band[b] += r.mae_per_band[b] * inv;
    }
    return out;
}

nlohmann::json json_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json mae = nlohmann::json::array();
    for (double v : r.mae_per_band) mae.push_back(json_number(v));
    return {{"cc", json_number(r.cc)},          {"sam_degrees", json_number(r.sam_degrees)},
            {"rmse", json_number(r.rmse)},      {"ergas", json_number(r.ergas)},
            {"psnr_db", json_number(r.psnr_db)}, {"mae_per_band", mae},
            {"scale_ratio", r.scale_ratio}};
}

}  // namespace hyperpan
