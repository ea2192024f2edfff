#include "hyperpan/image_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hyperpan/errors.hpp"
#include "hyperpan/nn.hpp"

namespace hyperpan {

HsiCube::HsiCube(Tensor t, std::vector<std::int32_t> ids) : data(std::move(t)), wavelength_ids(std::move(ids)) {
    if (data.rank() != 3 || data.dim(0) == 0) {
        throw DimensionError("HsiCube expects a [C,H,W] tensor with C >= 1, got " + shape_str(data.shape()));
    }
    if (!wavelength_ids.empty() && wavelength_ids.size() != data.dim(0)) {
        throw ContractError("HsiCube: " + std::to_string(wavelength_ids.size()) + " wavelength ids for " +
                            std::to_string(data.dim(0)) + " bands");
    }
}

PanImage::PanImage(Tensor t) : data(std::move(t)) {
    if (data.rank() != 3 || data.dim(0) != 1) {
        throw DimensionError("PanImage expects a [1,H,W] tensor, got " + shape_str(data.shape()));
    }
}

std::vector<double> SpectralResponse::weights(std::size_t bands) const {
    if (center_band < 0 || static_cast<std::size_t>(center_band) >= bands) {
        throw ContractError("spectral response center band " + std::to_string(center_band) + " outside [0, " +
                            std::to_string(bands) + ")");
    }
    std::vector<double> w(bands, 0.0);
    if (sigma_bands <= 0.0) {
        w[static_cast<std::size_t>(center_band)] = 1.0;
        return w;
    }
    double total = 0;
    for (std::size_t b = 0; b < bands; ++b) {
        const double d = static_cast<double>(b) - center_band;
        w[b] = std::exp(-d * d / (2 * sigma_bands * sigma_bands));
        total += w[b];
    }
    for (double& v : w) v /= total;
    return w;
}

RgbResponses pavia_responses(double sigma_bands) {
    return {SpectralResponse{10, sigma_bands}, SpectralResponse{30, sigma_bands}, SpectralResponse{60, sigma_bands}};
}

RgbResponses default_responses(std::size_t bands) {
    const double sigma = std::max(0.5, static_cast<double>(bands) / 20.0);
    if (bands > 60) return pavia_responses(sigma);
    RgbResponses r;
    const int centers[3] = {10, 30, 60};
    for (int i = 0; i < 3; ++i) {
        const double c = std::round(centers[i] * static_cast<double>(bands) / 102.0);
        r[i] = SpectralResponse{std::min(static_cast<int>(c), static_cast<int>(bands) - 1), sigma};
    }
    return r;
}

// ---------------------------------------------------------------------------
// Wald degradation

std::vector<double> gaussian_taps(std::size_t size, double sigma) {
    if (size == 0 || sigma <= 0) throw ContractError("gaussian_taps: need size >= 1 and sigma > 0");
    std::vector<double> t(size);
    const double center = (static_cast<double>(size) - 1.0) / 2.0;
    double total = 0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - center;
        t[i] = std::exp(-d * d / (2 * sigma * sigma));
        total += t[i];
    }
    for (double& v : t) v /= total;
    return t;
}

namespace {

// Mirror index without repeating the edge sample: -1 -> 1, n -> n-2.
std::size_t reflect(long i, long n) {
    if (n == 1) return 0;
    const long period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    if (i >= n) i = period - i;
    return static_cast<std::size_t>(i);
}

// Blur-and-decimate along one axis expressed as a [out,in] matrix.
std::vector<double> degrade_matrix(std::size_t in, std::size_t scale, const std::vector<double>& taps) {
    const std::size_t out = in / scale;
    const long k = static_cast<long>(taps.size());
    std::vector<double> m(out * in, 0.0);
    for (std::size_t u = 0; u < out; ++u) {
        // Taps centered on the middle of the u-th block of `scale` samples.
        const long start = static_cast<long>(u * scale) + static_cast<long>(scale) / 2 - k / 2;
        for (long i = 0; i < k; ++i) m[u * in + reflect(start + i, static_cast<long>(in))] += taps[static_cast<std::size_t>(i)];
    }
    return m;
}

}  // namespace

Tensor walds_degrade(const Tensor& img, const DegradeOptions& opts) {
    if (img.rank() != 3) throw DimensionError("walds_degrade: expected [C,H,W], got " + shape_str(img.shape()));
    if (opts.scale == 0 || img.dim(1) % opts.scale != 0 || img.dim(2) % opts.scale != 0) {
        throw DimensionError("walds_degrade: spatial size " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) +
                             " not divisible by scale " + std::to_string(opts.scale));
    }
    const auto taps = gaussian_taps(opts.kernel_size, opts.sigma);
    const std::size_t H = img.dim(1), W = img.dim(2);
    return resample_separable(img, degrade_matrix(H, opts.scale, taps), H / opts.scale, degrade_matrix(W, opts.scale, taps),
                              W / opts.scale);
}

HsiCube walds_degrade(const HsiCube& x_ref, const DegradeOptions& opts) {
    NoGradGuard no_grad;
    return HsiCube(walds_degrade(x_ref.data, opts), x_ref.wavelength_ids);
}

// ---------------------------------------------------------------------------
// Bicubic

double keys_kernel(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2) * x - (a + 3)) * x * x + 1;
    if (x < 2.0) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
    return 0.0;
}

std::vector<double> bicubic_matrix(std::size_t in_size, std::size_t out_size) {
    if (in_size == 0 || out_size == 0) throw DimensionError("bicubic_matrix: empty axis");
    const double scale = static_cast<double>(out_size) / static_cast<double>(in_size);
    const double widen = scale < 1.0 ? 1.0 / scale : 1.0;
    const double support = 2.0 * widen;
    std::vector<double> m(out_size * in_size, 0.0);
    for (std::size_t o = 0; o < out_size; ++o) {
        const double src = (static_cast<double>(o) + 0.5) / scale - 0.5;
        const long first = static_cast<long>(std::floor(src - support)) + 1;
        const long last = static_cast<long>(std::ceil(src + support)) - 1;
        double total = 0;
        std::vector<std::pair<std::size_t, double>> taps;
        for (long i = first; i <= last; ++i) {
            const double w = keys_kernel((src - static_cast<double>(i)) / widen);
            if (w == 0.0) continue;
            const long clamped = std::clamp<long>(i, 0, static_cast<long>(in_size) - 1);
            taps.emplace_back(static_cast<std::size_t>(clamped), w);
            total += w;
        }
        for (auto [idx, w] : taps) m[o * in_size + idx] += w / total;
    }
    return m;
}

Tensor bicubic_resample(const Tensor& img, ScaleFactor factor) {
    if (img.rank() != 3) throw DimensionError("bicubic_resample: expected [C,H,W], got " + shape_str(img.shape()));
    if (factor.num == 0 || factor.den == 0) throw ContractError("bicubic_resample: zero factor");
    const std::size_t H = img.dim(1), W = img.dim(2);
    if ((H * factor.num) % factor.den != 0 || (W * factor.num) % factor.den != 0 || H * factor.num < factor.den ||
        W * factor.num < factor.den) {
        throw DimensionError("bicubic_resample: " + std::to_string(H) + "x" + std::to_string(W) + " times " +
                             std::to_string(factor.num) + "/" + std::to_string(factor.den) +
                             " is not a positive integral size");
    }
    const std::size_t oh = H * factor.num / factor.den, ow = W * factor.num / factor.den;
    if (oh == H && ow == W) return img;
    return resample_separable(img, bicubic_matrix(H, oh), oh, bicubic_matrix(W, ow), ow);
}

Tensor make_pan_downup(const PanImage& pan) {
    NoGradGuard no_grad;
    return bicubic_resample(bicubic_resample(pan.data, ScaleFactor::down(4)), ScaleFactor::up(4));
}

// ---------------------------------------------------------------------------
// RGB / PAN synthesis

Tensor synthesize_rgb(const Tensor& cube, const RgbResponses& responses) {
    if (cube.rank() != 3) throw DimensionError("synthesize_rgb: expected [C,H,W], got " + shape_str(cube.shape()));
    const std::size_t C = cube.dim(0);
    std::vector<double> w;
    w.reserve(3 * C);
    for (const auto& r : responses) {
        auto rw = r.weights(C);
        w.insert(w.end(), rw.begin(), rw.end());
    }
    return conv2d(cube, Tensor({3, C, 1, 1}, std::move(w)), Tensor::zeros({3}));
}

PanImage synthesize_pan(const HsiCube& x_ref, std::size_t band_lo, std::size_t band_hi) {
    const std::size_t C = x_ref.bands();
    if (band_hi == 0) band_hi = C;
    if (band_lo >= band_hi || band_hi > C) {
        throw ContractError("synthesize_pan: band range [" + std::to_string(band_lo) + ", " + std::to_string(band_hi) +
                            ") invalid for " + std::to_string(C) + " bands");
    }
    const std::size_t hw = x_ref.height() * x_ref.width();
    std::vector<double> p(hw, 0.0);
    auto d = x_ref.data.data();
    for (std::size_t b = band_lo; b < band_hi; ++b)
        for (std::size_t i = 0; i < hw; ++i) p[i] += d[b * hw + i];
    const double inv = 1.0 / static_cast<double>(band_hi - band_lo);
    for (double& v : p) v *= inv;
    return PanImage(Tensor({1, x_ref.height(), x_ref.width()}, std::move(p)));
}

HsiCube normalize_unit(const HsiCube& cube) {
    auto d = cube.data.data();
    const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
    if (*lo >= 0.0 && *hi <= 1.0) return cube;
    const double span = *hi - *lo;
    std::vector<double> out(d.size(), 0.0);
    if (span > 0)
        for (std::size_t i = 0; i < d.size(); ++i) out[i] = (d[i] - *lo) / span;
    return HsiCube(Tensor(cube.data.shape(), std::move(out)), cube.wavelength_ids);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

Sample make_sample(const HsiCube& x_ref, const DegradeOptions& degrade) {
    return Sample{x_ref, synthesize_pan(x_ref), walds_degrade(x_ref, degrade)};
}

std::vector<Sample> synth_dataset(std::uint64_t seed, std::size_t n_patches, std::size_t bands, std::size_t height,
                                  std::size_t width, const DegradeOptions& degrade) {
    if (bands == 0 || height == 0 || width == 0 || height % degrade.scale != 0 || width % degrade.scale != 0) {
        throw DimensionError("synth_dataset: " + std::to_string(bands) + "x" + std::to_string(height) + "x" +
                             std::to_string(width) + " is not a valid patch for scale " + std::to_string(degrade.scale));
    }
    constexpr std::size_t kMaterials = 3;
    constexpr double pi = std::numbers::pi;
    std::mt19937_64 rng(seed);
    // Portable draws (the std distributions differ between standard libraries).
    auto u01 = [](std::mt19937_64& g) { return uniform(g, 0.0, 1.0); };
    auto gauss = [&](std::mt19937_64& g) {  // Box-Muller, one value per pair of draws
        const double u1 = 1.0 - u01(g), u2 = u01(g);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * pi * u2);
    };

    std::vector<Sample> out;
    out.reserve(n_patches);
    const std::size_t hw = height * width;
    for (std::size_t n = 0; n < n_patches; ++n) {
        // Smooth spectral signatures: ramp plus one slow oscillation.
        std::vector<std::vector<double>> spectra(kMaterials, std::vector<double>(bands));
        for (auto& s : spectra) {
            const double base = 0.2 + 0.3 * u01(rng), slope = 0.4 * (u01(rng) - 0.5);
            const double amp = 0.15 * u01(rng), freq = 0.5 + 1.5 * u01(rng), phase = 2 * pi * u01(rng);
            for (std::size_t b = 0; b < bands; ++b) {
                const double t = bands > 1 ? static_cast<double>(b) / static_cast<double>(bands - 1) : 0.0;
                s[b] = base + slope * t + amp * std::sin(pi * freq * t + phase);
            }
        }
        // Abundances: oriented gratings plus sharp-edged rectangles, softmax-mixed.
        std::vector<std::vector<double>> logits(kMaterials, std::vector<double>(hw, 0.0));
        for (auto& l : logits) {
            for (int g = 0; g < 2; ++g) {
                const double period = 3.0 + 9.0 * u01(rng), angle = pi * u01(rng), phase = 2 * pi * u01(rng);
                const double amp = 0.5 + u01(rng);
                const double cx = std::cos(angle) * 2 * pi / period, cy = std::sin(angle) * 2 * pi / period;
                for (std::size_t y = 0; y < height; ++y)
                    for (std::size_t x = 0; x < width; ++x)
                        l[y * width + x] += amp * std::sin(cx * static_cast<double>(x) + cy * static_cast<double>(y) + phase);
            }
            for (int r = 0; r < 3; ++r) {
                const auto y0 = static_cast<std::size_t>(u01(rng) * static_cast<double>(height));
                const auto x0 = static_cast<std::size_t>(u01(rng) * static_cast<double>(width));
                const auto rh = 1 + static_cast<std::size_t>(u01(rng) * static_cast<double>(height) / 2);
                const auto rw = 1 + static_cast<std::size_t>(u01(rng) * static_cast<double>(width) / 2);
                const double lift = 1.5 * (u01(rng) - 0.3);
                for (std::size_t y = y0; y < std::min(height, y0 + rh); ++y)
                    for (std::size_t x = x0; x < std::min(width, x0 + rw); ++x) l[y * width + x] += lift;
            }
        }
        std::vector<double> cube(bands * hw);
        std::vector<double> noise_band(bands);
        for (auto& v : noise_band) v = 0.5 + 0.5 * u01(rng);
        for (std::size_t i = 0; i < hw; ++i) {
            double mx = logits[0][i];
            for (std::size_t k = 1; k < kMaterials; ++k) mx = std::max(mx, logits[k][i]);
            double z = 0, a[kMaterials];
            for (std::size_t k = 0; k < kMaterials; ++k) z += (a[k] = std::exp(2.0 * (logits[k][i] - mx)));
            const double eps = 0.01 * gauss(rng);  // shared across bands
            for (std::size_t b = 0; b < bands; ++b) {
                double v = 0;
                for (std::size_t k = 0; k < kMaterials; ++k) v += a[k] / z * spectra[k][b];
                v += eps * noise_band[b];
                cube[b * hw + i] = std::clamp(v, 0.0, 1.0);
            }
        }
        HsiCube x_ref(Tensor({bands, height, width}, std::move(cube)));
        out.push_back(make_sample(x_ref, degrade));
    }
    return out;
}

}  // namespace hyperpan
