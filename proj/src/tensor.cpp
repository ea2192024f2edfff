#include "hyperpan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "hyperpan/errors.hpp"

namespace hyperpan {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::vector<double>& Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
    if (hyperpan::numel(shape) != data.size()) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = hyperpan::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= node_->shape[axis]) throw DimensionError("index out of range for shape " + shape_str(shape()));
        flat = flat * node_->shape[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) {
        throw ContractError("backward() on a tensor with no recorded tape");
    }

    // Iterative post-order DFS gives parents-before-children order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Release the tape; leaves keep their accumulated gradients.
    for (Node* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> inputs,
                   std::function<void(const Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool track = GradMode::enabled() &&
                 std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(inputs);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Walks every output index of `shape`, calling f(out_flat, a_flat, b_flat) with the
// matching flat offsets under two stride vectors (zero stride = broadcast axis).
template <class F>
void walk2(const Shape& shape, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t r = shape.size();
    const std::size_t total = numel(shape);
    if (total == 0) return;
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        f(o, ia, ib);
        for (std::size_t ax = r; ax-- > 0;) {
            if (++idx[ax] < shape[ax]) {
                ia += sa[ax];
                ib += sb[ax];
                break;
            }
            ia -= sa[ax] * (shape[ax] - 1);
            ib -= sb[ax] * (shape[ax] - 1);
            idx[ax] = 0;
        }
    }
}

struct Broadcast {
    Shape out;
    std::vector<std::size_t> sa, sb;
    bool same = false;
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) {
        throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    Broadcast bc;
    bc.same = (a == b);
    bc.out.resize(a.size());
    auto ca = contiguous_strides(a), cb = contiguous_strides(b);
    bc.sa.resize(a.size());
    bc.sb.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        bc.out[i] = std::max(a[i], b[i]);
        bc.sa[i] = a[i] == 1 ? 0 : ca[i];
        bc.sb[i] = b[i] == 1 ? 0 : cb[i];
    }
    return bc;
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
    check_defined(a, name);
    check_defined(b, name);
    Broadcast bc = broadcast_shapes(a.shape(), b.shape(), name);
    const auto& ad = a.node()->data;
    const auto& bd = b.node()->data;
    std::vector<double> out(numel(bc.out));
    auto apply = [op](double x, double y) {
        switch (op) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            default: return x * y;
        }
    };
    if (bc.same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(ad[i], bd[i]);
    } else {
        walk2(bc.out, bc.sa, bc.sb, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = apply(ad[ia], bd[ib]); });
    }
    NodePtr na = a.node(), nb = b.node();
    return make_result(bc.out, std::move(out), {na, nb}, [na, nb, bc, op](const Node& self) {
        const auto& g = self.grad;
        const double sign_b = op == BinOp::Sub ? -1.0 : 1.0;
        auto ga = na->requires_grad ? &na->ensure_grad() : nullptr;
        auto gb = nb->requires_grad ? &nb->ensure_grad() : nullptr;
        walk2(bc.out, bc.sa, bc.sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            if (op == BinOp::Mul) {
                if (ga) (*ga)[ia] += g[o] * nb->data[ib];
                if (gb) (*gb)[ib] += g[o] * na->data[ia];
            } else {
                if (ga) (*ga)[ia] += g[o];
                if (gb) (*gb)[ib] += sign_b * g[o];
            }
        });
    });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto& ad = a.node()->data;
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
    NodePtr na = a.node();
    return make_result(a.shape(), std::move(out), {na}, [na, deriv](const Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(na->data[i]);
    });
}

// Dot product with four independent partial sums.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

std::vector<double> transposed(const double* m, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = m[r * cols + c];
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor mul_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x * s; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary(
        a, [slope](double x) { return x > 0 ? x : slope * x; }, [slope](double x) { return x > 0 ? 1.0 : slope; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    double s = 0;
    for (double v : a.data()) s += v;
    NodePtr na = a.node();
    return make_result({}, {s}, {na}, [na](const Node& self) {
        auto& ga = na->ensure_grad();
        for (double& g : ga) g += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DimensionError("mean of empty tensor");
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes) {
    check_defined(a, "mean");
    Shape out_shape = a.shape();
    std::size_t count = 1;
    for (std::size_t ax : axes) {
        if (ax >= a.rank()) throw DimensionError("mean: axis " + std::to_string(ax) + " out of range for " + shape_str(a.shape()));
        count *= out_shape[ax];
        out_shape[ax] = 1;
    }
    if (count == 0) throw DimensionError("mean over empty axes of " + shape_str(a.shape()));
    auto so = contiguous_strides(out_shape);
    for (std::size_t ax : axes) so[ax] = 0;
    auto si = contiguous_strides(a.shape());
    std::vector<double> out(numel(out_shape), 0.0);
    const auto& ad = a.node()->data;
    walk2(a.shape(), si, so, [&](std::size_t, std::size_t ii, std::size_t io) { out[io] += ad[ii]; });
    const double inv = 1.0 / static_cast<double>(count);
    for (double& v : out) v *= inv;
    NodePtr na = a.node();
    Shape in_shape = a.shape();
    return make_result(out_shape, std::move(out), {na}, [na, in_shape, si, so, inv](const Node& self) {
        auto& ga = na->ensure_grad();
        walk2(in_shape, si, so, [&](std::size_t, std::size_t ii, std::size_t io) { ga[ii] += self.grad[io] * inv; });
    });
}

Tensor l1_norm(const Tensor& a) {
    check_defined(a, "l1_norm");
    double s = 0;
    for (double v : a.data()) s += std::abs(v);
    NodePtr na = a.node();
    return make_result({}, {s}, {na}, [na](const Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double v = na->data[i];
            ga[i] += self.grad[0] * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
        }
    });
}

Tensor l2_norm(const Tensor& a) {
    check_defined(a, "l2_norm");
    double s = 0;
    for (double v : a.data()) s += v * v;
    const double norm = std::sqrt(s);
    NodePtr na = a.node();
    return make_result({}, {norm}, {na}, [na, norm](const Node& self) {
        if (norm == 0.0) return;
        auto& ga = na->ensure_grad();
        const double scale = self.grad[0] / norm;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += scale * na->data[i];
    });
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& a, Shape shape) {
    check_defined(a, "reshape");
    if (numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    NodePtr na = a.node();
    return make_result(std::move(shape), na->data, {na}, [na](const Node& self) {
        auto& ga = na->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    check_defined(a, "permute");
    const std::size_t r = a.rank();
    if (axes.size() != r) throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for " + shape_str(a.shape()));
    std::vector<bool> used(r, false);
    Shape out_shape(r);
    auto si = contiguous_strides(a.shape());
    std::vector<std::size_t> src(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (axes[i] >= r || used[axes[i]]) throw DimensionError("permute: invalid axis order");
        used[axes[i]] = true;
        out_shape[i] = a.shape()[axes[i]];
        src[i] = si[axes[i]];
    }
    auto so = contiguous_strides(out_shape);
    std::vector<double> out(a.numel());
    const auto& ad = a.node()->data;
    walk2(out_shape, so, src, [&](std::size_t, std::size_t io, std::size_t ii) { out[io] = ad[ii]; });
    NodePtr na = a.node();
    return make_result(out_shape, std::move(out), {na}, [na, out_shape, so, src](const Node& self) {
        auto& ga = na->ensure_grad();
        walk2(out_shape, so, src, [&](std::size_t, std::size_t io, std::size_t ii) { ga[ii] += self.grad[io]; });
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat");
        if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (i != axis && p.shape()[i] != first[i]) {
                throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
            }
        }
        out_shape[axis] += p.shape()[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
    const std::size_t out_block = out_shape[axis] * inner;

    std::vector<double> out(numel(out_shape));
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t block = p.shape()[axis] * inner;
        const auto& pd = p.node()->data;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                        out.begin() + static_cast<std::ptrdiff_t>(o * out_block + off));
        nodes.push_back(p.node());
        offsets.push_back(off);
        off += block;
    }
    auto inputs = nodes;
    return make_result(out_shape, std::move(out), std::move(inputs),
                       [nodes, offsets, outer, inner, out_block, axis](const Node& self) {
                           for (std::size_t k = 0; k < nodes.size(); ++k) {
                               const auto& n = nodes[k];
                               if (!n->requires_grad) continue;
                               auto& g = n->ensure_grad();
                               const std::size_t block = n->shape[axis] * inner;
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < block; ++i) g[o * block + i] += self.grad[o * out_block + offsets[k] + i];
                           }
                       });
}

// ---------------------------------------------------------------------------
// matmul / softmax / linear

Tensor matmul_batched(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul_batched");
    check_defined(b, "matmul_batched");
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw DimensionError("matmul_batched: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), P = b.dim(2);
    const auto& ad = a.node()->data;
    const auto& bd = b.node()->data;
    std::vector<double> out(B * M * P, 0.0);
    for (std::size_t bb = 0; bb < B; ++bb) {
        const double* A = ad.data() + bb * M * K;
        const double* Bm = bd.data() + bb * K * P;
        double* O = out.data() + bb * M * P;
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) axpy(A[i * K + k], Bm + k * P, O + i * P, P);
    }
    NodePtr na = a.node(), nb = b.node();
    return make_result({B, M, P}, std::move(out), {na, nb}, [na, nb, B, M, K, P](const Node& self) {
        const double* G = self.grad.data();
        if (na->requires_grad) {
            auto& ga = na->ensure_grad();
            for (std::size_t bb = 0; bb < B; ++bb) {
                // dA = G * B^T
                auto bt = transposed(nb->data.data() + bb * K * P, K, P);  // [P,K]
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t j = 0; j < P; ++j)
                        axpy(G[bb * M * P + i * P + j], bt.data() + j * K, ga.data() + bb * M * K + i * K, K);
            }
        }
        if (nb->requires_grad) {
            auto& gb = nb->ensure_grad();
            for (std::size_t bb = 0; bb < B; ++bb) {
                // dB = A^T * G
                const double* A = na->data.data() + bb * M * K;
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k)
                        axpy(A[i * K + k], G + bb * M * P + i * P, gb.data() + bb * K * P + k * P, P);
            }
        }
    });
}

Tensor softmax(const Tensor& x, std::size_t dim) {
    check_defined(x, "softmax");
    if (dim >= x.rank()) throw DimensionError("softmax: dim " + std::to_string(dim) + " out of range for " + shape_str(x.shape()));
    const std::size_t n = x.shape()[dim];
    if (n == 0) throw DimensionError("softmax over empty axis of " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < dim; ++i) outer *= x.shape()[i];
    for (std::size_t i = dim + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    const auto& xd = x.node()->data;
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = xd[base];
            for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xd[base + k * inner]);
            double s = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const double e = std::exp(xd[base + k * inner] - mx);
                out[base + k * inner] = e;
                s += e;
            }
            for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
        }
    }
    NodePtr nx = x.node();
    auto y = std::make_shared<std::vector<double>>(out);
    return make_result(x.shape(), std::move(out), {nx}, [nx, y, outer, inner, n](const Node& self) {
        auto& gx = nx->ensure_grad();
        const auto& Y = *y;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                double s = 0;
                for (std::size_t k = 0; k < n; ++k) s += self.grad[base + k * inner] * Y[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t i = base + k * inner;
                    gx[i] += Y[i] * (self.grad[i] - s);
                }
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    check_defined(x, "linear");
    if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0) || x.rank() == 0 ||
        x.shape().back() != weight.dim(1)) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
    }
    const std::size_t din = weight.dim(1), dout = weight.dim(0);
    const std::size_t rows = x.numel() / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    const auto& xd = x.node()->data;
    const auto& bd = bias.node()->data;
    auto wt = transposed(weight.node()->data.data(), dout, din);  // [din, dout]
    std::vector<double> out(rows * dout);
    for (std::size_t r = 0; r < rows; ++r) {
        double* o = out.data() + r * dout;
        std::copy(bd.begin(), bd.end(), o);
        for (std::size_t d = 0; d < din; ++d) axpy(xd[r * din + d], wt.data() + d * dout, o, dout);
    }
    NodePtr nx = x.node(), nw = weight.node(), nb = bias.node();
    return make_result(out_shape, std::move(out), {nx, nw, nb}, [nx, nw, nb, rows, din, dout](const Node& self) {
        const double* G = self.grad.data();
        if (nx->requires_grad) {
            auto& gx = nx->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < dout; ++o) axpy(G[r * dout + o], nw->data.data() + o * din, gx.data() + r * din, din);
        }
        if (nw->requires_grad) {
            auto& gw = nw->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < dout; ++o) axpy(G[r * dout + o], nx->data.data() + r * din, gw.data() + o * din, din);
        }
        if (nb->requires_grad) {
            auto& gb = nb->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < dout; ++o) gb[o] += G[r * dout + o];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions

namespace {

// Geometry of a forward cross-correlation: input [cin,h,w] -> output [cout,ho,wo],
// weight laid out [cout,cin,k,k].
struct ConvGeom {
    std::size_t cin, h, w, cout, ho, wo, k, stride, pad;

    // Output columns ow whose tap kw lands inside the input row.
    std::pair<std::size_t, std::size_t> col_range(std::size_t kw) const {
        std::size_t lo = 0;
        if (pad > kw) lo = (pad - kw + stride - 1) / stride;
        if (w - 1 + pad < kw) return {1, 0};
        std::size_t hi = std::min(wo - 1, (w - 1 + pad - kw) / stride);
        return {lo, hi};
    }
    bool row_valid(std::size_t oh, std::size_t kh, std::size_t& ih) const {
        const std::size_t v = oh * stride + kh;
        if (v < pad) return false;
        ih = v - pad;
        return ih < h;
    }
};

// out[co,oh,ow] += sum_{ci,kh,kw} w[co,ci,kh,kw] * x[ci, oh*s+kh-p, ow*s+kw-p]
// Accumulates in (ci,kh,kw) order for each output element.
void correlate(const ConvGeom& g, const double* x, const double* wt, double* out) {
    const std::size_t kk = g.k * g.k;
    for (std::size_t co = 0; co < g.cout; ++co) {
        double* o_c = out + co * g.ho * g.wo;
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double* x_c = x + ci * g.h * g.w;
            const double* w_cc = wt + (co * g.cin + ci) * kk;
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                for (std::size_t kw = 0; kw < g.k; ++kw) {
                    const double wv = w_cc[kh * g.k + kw];
                    auto [lo, hi] = g.col_range(kw);
                    if (lo > hi) continue;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        std::size_t ih;
                        if (!g.row_valid(oh, kh, ih)) continue;
                        const double* xr = x_c + ih * g.w + kw - g.pad;
                        double* orow = o_c + oh * g.wo;
                        if (g.stride == 1) {
                            for (std::size_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * xr[ow];
                        } else {
                            for (std::size_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * xr[ow * g.stride];
                        }
                    }
                }
            }
        }
    }
}

// gx[ci, oh*s+kh-p, ow*s+kw-p] += w[co,ci,kh,kw] * gout[co,oh,ow]
void scatter(const ConvGeom& g, const double* gout, const double* wt, double* gx) {
    const std::size_t kk = g.k * g.k;
    for (std::size_t co = 0; co < g.cout; ++co) {
        const double* g_c = gout + co * g.ho * g.wo;
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
            double* x_c = gx + ci * g.h * g.w;
            const double* w_cc = wt + (co * g.cin + ci) * kk;
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                for (std::size_t kw = 0; kw < g.k; ++kw) {
                    const double wv = w_cc[kh * g.k + kw];
                    auto [lo, hi] = g.col_range(kw);
                    if (lo > hi) continue;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        std::size_t ih;
                        if (!g.row_valid(oh, kh, ih)) continue;
                        double* xr = x_c + ih * g.w + kw - g.pad;
                        const double* grow = g_c + oh * g.wo;
                        if (g.stride == 1) {
                            for (std::size_t ow = lo; ow <= hi; ++ow) xr[ow] += wv * grow[ow];
                        } else {
                            for (std::size_t ow = lo; ow <= hi; ++ow) xr[ow * g.stride] += wv * grow[ow];
                        }
                    }
                }
            }
        }
    }
}

// gw[co,ci,kh,kw] += sum_{oh,ow} gout[co,oh,ow] * x[ci, oh*s+kh-p, ow*s+kw-p]
void weight_grad(const ConvGeom& g, const double* x, const double* gout, double* gw) {
    const std::size_t kk = g.k * g.k;
    std::vector<double> strided(g.wo);
    for (std::size_t co = 0; co < g.cout; ++co) {
        const double* g_c = gout + co * g.ho * g.wo;
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double* x_c = x + ci * g.h * g.w;
            double* w_cc = gw + (co * g.cin + ci) * kk;
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                for (std::size_t kw = 0; kw < g.k; ++kw) {
                    auto [lo, hi] = g.col_range(kw);
                    if (lo > hi) continue;
                    const std::size_t n = hi - lo + 1;
                    double acc = 0;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        std::size_t ih;
                        if (!g.row_valid(oh, kh, ih)) continue;
                        const double* xr = x_c + ih * g.w + kw - g.pad;
                        const double* grow = g_c + oh * g.wo;
                        if (g.stride == 1) {
                            acc += dot(grow + lo, xr + lo, n);
                        } else {
                            for (std::size_t ow = lo; ow <= hi; ++ow) strided[ow - lo] = xr[ow * g.stride];
                            acc += dot(grow + lo, strided.data(), n);
                        }
                    }
                    w_cc[kh * g.k + kw] += acc;
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    check_defined(x, "conv2d");
    if (x.rank() != 3 || weight.rank() != 4 || bias.rank() != 1 || weight.dim(1) != x.dim(0) ||
        weight.dim(2) != weight.dim(3) || bias.dim(0) != weight.dim(0)) {
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
    }
    const std::size_t k = weight.dim(2);
    if (k % 2 == 0) {
        throw ContractError("conv2d: kernel size must be odd, got " + std::to_string(k));
    }
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    const std::size_t H = x.dim(1), W = x.dim(2);
    // Output side floor((H + 2p - k) / s) + 1; trailing rows a stride cannot reach are dropped.
    if (H + 2 * padding < k || W + 2 * padding < k) {
        throw DimensionError("conv2d: empty output for input " + shape_str(x.shape()) + ", kernel " +
                             std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                             std::to_string(padding));
    }
    ConvGeom g{x.dim(0), H, W, weight.dim(0), (H + 2 * padding - k) / stride + 1, (W + 2 * padding - k) / stride + 1,
               k, stride, padding};
    std::vector<double> out(g.cout * g.ho * g.wo);
    const auto& bd = bias.node()->data;
    for (std::size_t co = 0; co < g.cout; ++co)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(co * g.ho * g.wo), g.ho * g.wo, bd[co]);
    correlate(g, x.node()->data.data(), weight.node()->data.data(), out.data());

    NodePtr nx = x.node(), nw = weight.node(), nb = bias.node();
    return make_result({g.cout, g.ho, g.wo}, std::move(out), {nx, nw, nb}, [nx, nw, nb, g](const Node& self) {
        const double* G = self.grad.data();
        if (nx->requires_grad) scatter(g, G, nw->data.data(), nx->ensure_grad().data());
        if (nw->requires_grad) weight_grad(g, nx->data.data(), G, nw->ensure_grad().data());
        if (nb->requires_grad) {
            auto& gb = nb->ensure_grad();
            for (std::size_t co = 0; co < g.cout; ++co)
                for (std::size_t i = 0; i < g.ho * g.wo; ++i) gb[co] += G[co * g.ho * g.wo + i];
        }
    });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t padding) {
    check_defined(x, "conv_transpose2d");
    if (x.rank() != 3 || weight.rank() != 4 || bias.rank() != 1 || weight.dim(0) != x.dim(0) ||
        weight.dim(2) != weight.dim(3) || bias.dim(0) != weight.dim(1)) {
        throw DimensionError("conv_transpose2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
    }
    if (stride == 0) throw ContractError("conv_transpose2d: stride must be positive");
    const std::size_t k = weight.dim(2), H = x.dim(1), W = x.dim(2);
    if (H == 0 || W == 0 || (H - 1) * stride + k <= 2 * padding) {
        throw DimensionError("conv_transpose2d: empty output for input " + shape_str(x.shape()));
    }
    const std::size_t Ho = (H - 1) * stride + k - 2 * padding;
    const std::size_t Wo = (W - 1) * stride + k - 2 * padding;
    // The adjoint conv maps [cout_t,Ho,Wo] -> [cin_t,H,W] with weight [cin_t,cout_t,k,k].
    ConvGeom g{weight.dim(1), Ho, Wo, weight.dim(0), H, W, k, stride, padding};
    std::vector<double> out(g.cin * Ho * Wo);
    const auto& bd = bias.node()->data;
    for (std::size_t c = 0; c < g.cin; ++c)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(c * Ho * Wo), Ho * Wo, bd[c]);
    scatter(g, x.node()->data.data(), weight.node()->data.data(), out.data());

    NodePtr nx = x.node(), nw = weight.node(), nb = bias.node();
    return make_result({g.cin, Ho, Wo}, std::move(out), {nx, nw, nb}, [nx, nw, nb, g](const Node& self) {
        const double* G = self.grad.data();
        if (nx->requires_grad) correlate(g, G, nw->data.data(), nx->ensure_grad().data());
        if (nw->requires_grad) weight_grad(g, G, nx->data.data(), nw->ensure_grad().data());
        if (nb->requires_grad) {
            auto& gb = nb->ensure_grad();
            for (std::size_t c = 0; c < g.cin; ++c)
                for (std::size_t i = 0; i < g.h * g.w; ++i) gb[c] += G[c * g.h * g.w + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Batch norm

RunningStats RunningStats::init(std::size_t channels) {
    return RunningStats{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats, bool training,
                    BatchNormOptions opts) {
    check_defined(x, "batch_norm2d");
    if (x.rank() != 3) throw DimensionError("batch_norm2d: expected [C,H,W], got " + shape_str(x.shape()));
    const std::size_t C = x.dim(0), n = x.dim(1) * x.dim(2);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C} || stats.mean.size() != C || stats.var.size() != C) {
        throw DimensionError("batch_norm2d: parameter shapes do not match " + std::to_string(C) + " channels");
    }
    if (n == 0) throw DimensionError("batch_norm2d: empty spatial extent");
    const auto& xd = x.node()->data;
    const auto& gd = gamma.node()->data;
    const auto& bd = beta.node()->data;
    std::vector<double> xhat(xd.size()), inv_std(C), out(xd.size());
    for (std::size_t c = 0; c < C; ++c) {
        const double* xc = xd.data() + c * n;
        double mu, var;
        if (training) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += xc[i];
            mu = s / static_cast<double>(n);
            double ss = 0;
            for (std::size_t i = 0; i < n; ++i) ss += (xc[i] - mu) * (xc[i] - mu);
            var = ss / static_cast<double>(n);
            const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
            stats.mean[c] = (1.0 - opts.momentum) * stats.mean[c] + opts.momentum * mu;
            stats.var[c] = (1.0 - opts.momentum) * stats.var[c] + opts.momentum * unbiased;
        } else {
            mu = stats.mean[c];
            var = stats.var[c];
        }
        inv_std[c] = 1.0 / std::sqrt(var + opts.eps);
        for (std::size_t i = 0; i < n; ++i) {
            xhat[c * n + i] = (xc[i] - mu) * inv_std[c];
            out[c * n + i] = gd[c] * xhat[c * n + i] + bd[c];
        }
    }
    NodePtr nx = x.node(), ng = gamma.node(), nb = beta.node();
    return make_result(x.shape(), std::move(out), {nx, ng, nb},
                       [nx, ng, nb, xhat = std::move(xhat), inv_std, C, n, training](const Node& self) {
                           const double* G = self.grad.data();
                           if (ng->requires_grad || nb->requires_grad) {
                               for (std::size_t c = 0; c < C; ++c) {
                                   double sg = 0, sgx = 0;
                                   for (std::size_t i = 0; i < n; ++i) {
                                       sg += G[c * n + i];
                                       sgx += G[c * n + i] * xhat[c * n + i];
                                   }
                                   if (ng->requires_grad) ng->ensure_grad()[c] += sgx;
                                   if (nb->requires_grad) nb->ensure_grad()[c] += sg;
                               }
                           }
                           if (!nx->requires_grad) return;
                           auto& gx = nx->ensure_grad();
                           const double dn = static_cast<double>(n);
                           for (std::size_t c = 0; c < C; ++c) {
                               const double gm = ng->data[c];
                               if (!training) {
                                   for (std::size_t i = 0; i < n; ++i) gx[c * n + i] += G[c * n + i] * gm * inv_std[c];
                                   continue;
                               }
                               double sd = 0, sdx = 0;
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double d = G[c * n + i] * gm;
                                   sd += d;
                                   sdx += d * xhat[c * n + i];
                               }
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double d = G[c * n + i] * gm;
                                   gx[c * n + i] += inv_std[c] / dn * (dn * d - sd - xhat[c * n + i] * sdx);
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// Separable resampling

Tensor resample_separable(const Tensor& x, const std::vector<double>& rows, std::size_t out_h,
                          const std::vector<double>& cols, std::size_t out_w) {
    check_defined(x, "resample_separable");
    if (x.rank() != 3) throw DimensionError("resample_separable: expected [C,H,W], got " + shape_str(x.shape()));
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (rows.size() != out_h * H || cols.size() != out_w * W) {
        throw DimensionError("resample_separable: interpolation matrices do not match input " + shape_str(x.shape()));
    }
    auto cols_t = std::make_shared<std::vector<double>>(transposed(cols.data(), out_w, W));  // [W, out_w]
    const auto& xd = x.node()->data;
    std::vector<double> out(C * out_h * out_w, 0.0), tmp(out_h * W);
    for (std::size_t c = 0; c < C; ++c) {
        std::fill(tmp.begin(), tmp.end(), 0.0);
        for (std::size_t oh = 0; oh < out_h; ++oh)
            for (std::size_t h = 0; h < H; ++h) {
                const double r = rows[oh * H + h];
                if (r != 0.0) axpy(r, xd.data() + (c * H + h) * W, tmp.data() + oh * W, W);
            }
        double* oc = out.data() + c * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh)
            for (std::size_t w = 0; w < W; ++w) axpy(tmp[oh * W + w], cols_t->data() + w * out_w, oc + oh * out_w, out_w);
    }
    NodePtr nx = x.node();
    auto rows_p = std::make_shared<std::vector<double>>(rows);
    auto cols_p = std::make_shared<std::vector<double>>(cols);
    return make_result({C, out_h, out_w}, std::move(out), {nx}, [nx, rows_p, cols_p, C, H, W, out_h, out_w](const Node& self) {
        auto& gx = nx->ensure_grad();
        std::vector<double> gtmp(out_h * W);
        for (std::size_t c = 0; c < C; ++c) {
            std::fill(gtmp.begin(), gtmp.end(), 0.0);
            const double* G = self.grad.data() + c * out_h * out_w;
            for (std::size_t oh = 0; oh < out_h; ++oh)
                for (std::size_t ow = 0; ow < out_w; ++ow)
                    axpy(G[oh * out_w + ow], cols_p->data() + ow * W, gtmp.data() + oh * W, W);
            for (std::size_t oh = 0; oh < out_h; ++oh)
                for (std::size_t h = 0; h < H; ++h) {
                    const double r = (*rows_p)[oh * H + h];
                    if (r != 0.0) axpy(r, gtmp.data() + oh * W, gx.data() + (c * H + h) * W, W);
                }
        }
    });
}

}  // namespace hyperpan
