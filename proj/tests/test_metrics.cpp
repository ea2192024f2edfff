#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "hyperpan/errors.hpp"
#include "hyperpan/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace hyperpan;
using namespace hyperpan::testing;

namespace {

Tensor cube(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
    return random_tensor({c, h, w}, rng, 0.05, 1.0);
}

}  // namespace

TEST_CASE("every metric attains its ideal value exactly at x = x_ref") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor r = cube(4, 8, 8, rng);
        CHECK(cc(r, r) == 1.0);
        CHECK(sam(r, r) == 0.0);
        CHECK(rmse(r, r) == 0.0);
        CHECK(ergas(r, r) == 0.0);
        CHECK(psnr(r, r) == std::numeric_limits<double>::infinity());
        for (double m : mae_per_band(r, r)) CHECK(m == 0.0);
    }
}

TEST_CASE("metrics equal naive-loop oracles") {
    std::mt19937_64 rng(2);
    for (auto [c, h, w] : {std::tuple{1, 2, 2}, {2, 3, 5}, {4, 8, 8}, {3, 8, 4}}) {
        Tensor x = cube(c, h, w, rng), r = cube(c, h, w, rng);
        CHECK(std::abs(cc(x, r) - oracle_cc(x, r)) < 1e-10);
        CHECK(std::abs(sam(x, r) - oracle_sam(x, r)) < 1e-10);
        CHECK(std::abs(rmse(x, r) - oracle_rmse(x, r)) < 1e-10);
        CHECK(std::abs(psnr(x, r) - oracle_psnr(x, r)) < 1e-10);
        CHECK(std::abs(ergas(x, r, 4) - oracle_ergas(x, r, 4)) < 1e-10);
        auto mae = mae_per_band(x, r);
        auto want = oracle_mae(x, r);
        REQUIRE(mae.size() == want.size());
        for (std::size_t b = 0; b < mae.size(); ++b) CHECK(std::abs(mae[b] - want[b]) < 1e-12);
    }
}

TEST_CASE("cc: anti-correlation and affine invariance") {
    std::mt19937_64 rng(3);
    Tensor r = cube(3, 6, 6, rng);
    // Mean-centre each band so that -r is the exact mirror image.
    std::vector<double> v(r.data().begin(), r.data().end());
    for (std::size_t b = 0; b < 3; ++b) {
        double m = 0;
        for (std::size_t i = 0; i < 36; ++i) m += v[b * 36 + i];
        m /= 36;
        for (std::size_t i = 0; i < 36; ++i) v[b * 36 + i] -= m;
    }
    Tensor centred({3, 6, 6}, v);
    CHECK(cc(neg(centred), centred) == -1.0);
    CHECK(cc(mul_scalar(r, 2.0), r) == 1.0);
    CHECK(cc(add_scalar(mul_scalar(r, 3.7), 0.25), r) == doctest::Approx(1.0).epsilon(1e-14));

    Tensor flat = Tensor::full({2, 2, 2}, 0.5);
    Tensor ok({2, 2, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8});
    CHECK_THROWS_AS(cc(ok, flat), DegenerateError);
    CHECK_THROWS_WITH_AS(cc(flat, ok), doctest::Contains("band 0"), DegenerateError);
}

TEST_CASE("sam: scale invariance, orthogonal spectra, degenerate pixel") {
    std::mt19937_64 rng(4);
    Tensor r = cube(5, 4, 4, rng);
    CHECK(sam(mul_scalar(r, 2.0), r) == 0.0);
    CHECK(sam(mul_scalar(r, 3.3), r) == doctest::Approx(0.0));
    CHECK(sam(Tensor({2, 1, 1}, {1.0, 0.0}), Tensor({2, 1, 1}, {0.0, 1.0})) == 90.0);
    CHECK_THROWS_AS(sam(Tensor::zeros({2, 1, 1}), Tensor({2, 1, 1}, {0.0, 1.0})), DegenerateError);
}

TEST_CASE("rmse and psnr closed forms") {
    std::mt19937_64 rng(5);
    Tensor r = cube(2, 4, 4, rng);
    Tensor x = add_scalar(r, 0.1);
    CHECK(rmse(x, r) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(psnr(x, r) == doctest::Approx(20.0).epsilon(1e-12));
    Tensor a({1, 1, 2}, {0.0, 0.3}), b({1, 1, 2}, {0.4, 0.3});
    CHECK(std::abs(rmse(a, b) - std::sqrt(0.08)) < 1e-15);
    CHECK(rmse(a, b) == doctest::Approx(0.28284).epsilon(1e-5));
    // psnr is exactly the stated function of rmse.
    Tensor y = cube(2, 4, 4, rng);
    CHECK(psnr(y, r) == 20.0 * std::log10(1.0 / rmse(y, r)));
}

TEST_CASE("ergas closed form and joint-scale invariance") {
    Tensor r = Tensor::full({1, 4, 4}, 0.5);
    Tensor x = Tensor::full({1, 4, 4}, 0.55);
    CHECK(std::abs(ergas(x, r, 4) - 2.5) < 1e-12);
    std::mt19937_64 rng(6);
    Tensor a = cube(3, 5, 5, rng), b = cube(3, 5, 5, rng);
    CHECK(ergas(mul_scalar(a, 2.0), mul_scalar(b, 2.0)) == ergas(a, b));
    CHECK(ergas(mul_scalar(a, 0.7), mul_scalar(b, 0.7)) == doctest::Approx(ergas(a, b)).epsilon(1e-13));
    CHECK_THROWS_AS(ergas(a, Tensor::zeros({3, 5, 5})), DegenerateError);
}

TEST_CASE("mae_per_band picks out a single-band offset") {
    std::mt19937_64 rng(7);
    Tensor r = cube(3, 4, 4, rng);
    std::vector<double> v(r.data().begin(), r.data().end());
    for (std::size_t i = 0; i < 16; ++i) v[i] += 0.2;
    auto mae = mae_per_band(Tensor({3, 4, 4}, v), r);
    CHECK(mae[0] == doctest::Approx(0.2).epsilon(1e-14));
    CHECK(mae[1] == 0.0);
    CHECK(mae[2] == 0.0);
}

TEST_CASE("rsnr, shape errors, report serialization and averaging") {
    std::mt19937_64 rng(8);
    Tensor r = cube(2, 3, 3, rng), x = cube(2, 3, 3, rng);
    double sig = 0, err = 0;
    for (std::size_t i = 0; i < r.numel(); ++i) {
        sig += r.data()[i] * r.data()[i];
        err += (r.data()[i] - x.data()[i]) * (r.data()[i] - x.data()[i]);
    }
    CHECK(rsnr(x, r) == doctest::Approx(10 * std::log10(sig / err)).epsilon(1e-13));
    CHECK(rsnr(r, r) == std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(rmse(x, cube(2, 3, 4, rng)), DimensionError);

    auto ideal = to_json(compute_metrics(r, r));
    CHECK(ideal["psnr_db"] == "inf");
    CHECK(ideal["cc"] == 1.0);
    CHECK(ideal["mae_per_band"].size() == 2);
    CHECK(ideal["scale_ratio"] == 4);

    auto a = compute_metrics(x, r), b = compute_metrics(r, x);
    auto avg = average({a, b});
    CHECK(avg.rmse == doctest::Approx((a.rmse + b.rmse) / 2));
    CHECK(avg.mae_per_band[1] == doctest::Approx((a.mae_per_band[1] + b.mae_per_band[1]) / 2));
    CHECK_THROWS_AS(average({}), ContractError);
}
