#pragma once

// Test-only helpers: seeded random tensors and a central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "hyperpan/tensor.hpp"

namespace hyperpan::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Like random_tensor but keeps every entry at least `gap` away from zero, so
/// kinked ops (relu, abs) are differentiable at the sample.
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.05, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = sign(rng) ? dist(rng) : -dist(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Elementwise relative error with a floor on the denominator: gradients below
/// `floor` in magnitude are effectively compared in absolute terms.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares backward() against central differences for every entry of every
/// tensor in `inputs` (or `max_per_input` sampled entries when nonzero).
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs, double h = 1e-5,
                                  std::size_t max_per_input = 0, std::uint64_t sample_seed = 7) {
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }

    GradCheckResult result;
    std::mt19937_64 rng(sample_seed);
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        std::vector<std::size_t> idx(data.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (max_per_input && idx.size() > max_per_input) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(max_per_input);
        }
        for (std::size_t i : idx) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = loss_fn().item();
            data[i] = orig - h;
            const double fm = loss_fn().item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2 * h);
            result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[k][i], numeric));
            ++result.checked;
        }
    }
    return result;
}

struct SampledGradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// Draws rejected because the loss is not differentiable within +-h there.
    std::size_t kinks = 0;
};

/// Central differences on `count` entries drawn uniformly from the union of
/// all `params` (a parameter tensor is picked in proportion to its size).
///
/// Networks with ReLUs have kinks; a draw whose +-h stencil straddles one
/// yields a meaningless difference quotient. Such draws are recognized without
/// consulting the analytic gradient (the quotients at h and h/10 disagree by
/// more than `kink_tol` relative) and replaced by a fresh draw.
inline SampledGradCheckResult sampled_grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                                 std::size_t count, double h = 1e-5, std::uint64_t sample_seed = 11,
                                                 double kink_tol = 1e-5) {
    for (auto& t : params) t.zero_grad();
    loss_fn().backward();
    std::size_t total = 0;
    for (auto& t : params) total += t.numel();

    SampledGradCheckResult result;
    std::mt19937_64 rng(sample_seed);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    NoGradGuard no_grad;
    auto quotient = [&](std::span<double> data, std::size_t i, double step) {
        const double orig = data[i];
        data[i] = orig + step;
        const double fp = loss_fn().item();
        data[i] = orig - step;
        const double fm = loss_fn().item();
        data[i] = orig;
        return (fp - fm) / (2 * step);
    };
    while (result.checked < count) {
        std::size_t flat = pick(rng), k = 0;
        while (flat >= params[k].numel()) flat -= params[k++].numel();
        auto data = params[k].mutable_data();
        const double numeric = quotient(data, flat, h);
        const double fine = quotient(data, flat, h / 10);
        if (relative_error(numeric, fine) > kink_tol) {
            ++result.kinks;
            continue;
        }
        const double analytic = params[k].has_grad() ? params[k].grad()[flat] : 0.0;
        result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric));
        ++result.checked;
    }
    return result;
}

}  // namespace hyperpan::testing
