#pragma once

// Dense N-d tensors with define-by-run reverse-mode differentiation.
//
// Every op records its parents and a backward closure on the result when
// gradient mode is on and at least one input requires a gradient. The graph
// hanging off a loss is the tape; Tensor::backward() walks it once in reverse
// topological order and then releases it.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hyperpan {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thread-local switch for tape recording.
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until something flows in
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward_fn;

    std::vector<double>& ensure_grad();
};

}  // namespace detail

class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Direct write access. Only meaningful on leaves (parameters, inputs); writing
    /// into a recorded intermediate does not update its dependents.
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Same values, no history.
    Tensor detach() const;

    /// Seeds d(this)/d(this) = 1 and accumulates into every reachable leaf.
    void backward() const;

    // Internal: op implementations build results through these.
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Elementwise and reductions

/// Binary ops broadcast equal-rank operands over size-1 axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over the listed axes; reduced axes are kept with size 1.
Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes);

Tensor l1_norm(const Tensor& a);
/// Euclidean norm. Gradient at the origin is taken as zero.
Tensor l2_norm(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// ---------------------------------------------------------------------------
// Linear algebra and neural layers

/// [B,M,K] x [B,K,P] -> [B,M,P]
Tensor matmul_batched(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t dim);

/// Affine map over the last axis. weight is [D_out, D_in], bias [D_out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Cross-correlation. x [C_in,H,W], weight [C_out,C_in,k,k] with k odd, bias [C_out].
/// Output side is floor((H + 2*padding - k) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride = 1, std::size_t padding = 0);

/// Adjoint of conv2d. x [C_in,H,W], weight [C_in,C_out,k,k], bias [C_out];
/// output side (H-1)*stride - 2*padding + k.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::size_t stride, std::size_t padding = 0);

struct RunningStats {
    std::vector<double> mean;
    std::vector<double> var;

    static RunningStats init(std::size_t channels);
};

struct BatchNormOptions {
    double eps = 1e-5;
    double momentum = 0.1;
};

/// Per-channel normalization of a [C,H,W] map. In training mode the spatial
/// statistics normalize the input and are folded into `stats`.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    RunningStats& stats, bool training, BatchNormOptions opts = {});

/// out[c] = rows * x[c] * cols^T for fixed (non-differentiable) matrices
/// rows [H',H] and cols [W',W], both row-major.
Tensor resample_separable(const Tensor& x, const std::vector<double>& rows, std::size_t out_h,
                          const std::vector<double>& cols, std::size_t out_w);

}  // namespace hyperpan
