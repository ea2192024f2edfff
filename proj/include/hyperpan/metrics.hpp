#pragma once

// Full-reference quality measures for a predicted cube against its reference.
// All functions take [C,H,W] tensors of equal shape and read values only.

#include <cstdint>
#include <string>
#include <vector>

#include "hyperpan/tensor.hpp"
#include "json.hpp"

namespace hyperpan {

/// Mean over bands of the Pearson correlation of corresponding band images.
/// Throws DegenerateError naming the band when either band is constant.
double cc(const Tensor& x, const Tensor& x_ref);

/// Mean spectral angle in degrees. Throws DegenerateError on a zero spectrum.
double sam(const Tensor& x, const Tensor& x_ref);

double rmse(const Tensor& x, const Tensor& x_ref);

/// 20 log10(1 / rmse) for unit peak; +infinity for identical cubes.
double psnr(const Tensor& x, const Tensor& x_ref);

/// 100 / ratio * sqrt(mean_b (rmse_b / mean_b(x_ref))^2). Throws DegenerateError on a zero-mean reference band.
double ergas(const Tensor& x, const Tensor& x_ref, double ratio = 4.0);

/// 10 log10(||x_ref||^2 / ||x_ref - x||^2); +infinity for identical cubes.
double rsnr(const Tensor& x, const Tensor& x_ref);

std::vector<double> mae_per_band(const Tensor& x, const Tensor& x_ref);

struct MetricsReport {
    double cc = 0.0;
    double sam_degrees = 0.0;
    double rmse = 0.0;
    double ergas = 0.0;
    double psnr_db = 0.0;
    std::vector<double> mae_per_band;
    int scale_ratio = 4;
};

MetricsReport compute_metrics(const Tensor& x, const Tensor& x_ref, int scale_ratio = 4);

/// Arithmetic mean of each field; PSNR averages to +infinity if any patch is exact.
MetricsReport average(const std::vector<MetricsReport>& reports);

/// JSON object with the five metrics and the MAE curve. Non-finite values are
/// written as the strings "inf", "-inf" or "nan".
nlohmann::json to_json(const MetricsReport& r);
nlohmann::json json_number(double v);

}  // namespace hyperpan
