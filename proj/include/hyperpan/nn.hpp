#pragma once

// Parameterized layers and the registry that owns their tensors.
//
// Layers hold Tensor handles that share storage with the registry, so an
// optimizer stepping the registry updates every layer in place.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hyperpan/tensor.hpp"

namespace hyperpan {

struct Linear {
    Tensor weight;  // [out, in]
    Tensor bias;    // [out]

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }
};

struct Conv2d {
    Tensor weight;  // [out, in, k, k]
    Tensor bias;    // [out]
    std::size_t stride = 1;
    std::size_t padding = 0;

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

struct ConvTranspose2d {
    Tensor weight;  // [in, out, k, k]
    Tensor bias;    // [out]
    std::size_t stride = 1;
    std::size_t padding = 0;

    Tensor operator()(const Tensor& x) const { return conv_transpose2d(x, weight, bias, stride, padding); }
};

struct BatchNorm2d {
    Tensor gamma;
    Tensor beta;
    std::shared_ptr<RunningStats> stats;

    Tensor operator()(const Tensor& x, bool training) const { return batch_norm2d(x, gamma, beta, *stats, training); }
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct NamedStats {
    std::string name;
    std::shared_ptr<RunningStats> stats;
};

/// Creates layers with seeded Kaiming-uniform weights (bound sqrt(6 / fan_in)),
/// zero biases, and BN gamma = 1, beta = 0, recording every tensor by name in
/// declaration order.
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed, bool trainable = true);

    Linear linear(const std::string& name, std::size_t in, std::size_t out);
    /// `init_scale` multiplies the Kaiming bound (e.g. 0.1 for the last conv of a residual branch).
    Conv2d conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                std::size_t padding = 0, double init_scale = 1.0);
    ConvTranspose2d conv_transpose(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                                   std::size_t stride, std::size_t padding = 0);
    BatchNorm2d batch_norm(const std::string& name, std::size_t channels);

    const std::vector<NamedTensor>& parameters() const { return params_; }
    const std::vector<NamedStats>& buffers() const { return buffers_; }
    std::size_t parameter_count() const;

    void zero_grad();
    /// Looks a parameter up by name; throws ContractError when absent.
    const Tensor& find(const std::string& name) const;

private:
    Tensor make(const std::string& name, Shape shape, double bound);
    Tensor make_constant(const std::string& name, Shape shape, double value);

    std::mt19937_64 rng_;
    bool trainable_;
    std::vector<NamedTensor> params_;
    std::vector<NamedStats> buffers_;
};

/// Uniform double in [lo, hi) from the top 53 bits of one draw; identical
/// across standard libraries, unlike std::uniform_real_distribution.
double uniform(std::mt19937_64& rng, double lo, double hi);

}  // namespace hyperpan
