// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qgrade/error.hpp"

namespace qgrade {

namespace detail {

// dot product with independent accumulators so the compiler can pipeline
inline double dot(const double* x, const double* y, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T  (rows of A against rows of B)
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += dot(ai, b + j * k, k);
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const double* ap = a + p * k;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// GELU, tanh approximation. The constants below are the single source of
// truth for golden outputs; they appear nowhere else in the library.
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubicCoeff = 0.044715;

inline double gelu_value(double x) {
    const double u = kGeluSqrt2OverPi * (x + kGeluCubicCoeff * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
    const double u = kGeluSqrt2OverPi * (x + kGeluCubicCoeff * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubicCoeff * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace detail

/// Dense row-major fp64 tensor, rank 1-3, shared-handle semantics. A copy of
/// a Tensor aliases the same storage; clone() makes an independent one.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        validate_shape(shape);
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(product(t.impl_->shape), 0.0);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values,
                              bool requires_grad = false) {
        validate_shape(shape);
        require(values.size() == product(shape), ErrorCode::shape_mismatch,
                "value count " + std::to_string(values.size()) + " does not match shape product " +
                    std::to_string(product(shape)));
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_values({1}, {v}, requires_grad);
    }

    bool defined() const noexcept { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::span<const double> values() const { return impl_->data; }
    std::span<double> values_mut() { return impl_->data; }

    double item() const {
        require(size() == 1, ErrorCode::not_scalar, "item() on non-scalar tensor");
        return impl_->data[0];
    }

    double at(std::size_t i) const { return impl_->data[i]; }
    double& at(std::size_t i) { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::vector<double>& grad_buffer() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy of data (grad is not copied).
    Tensor clone(bool requires_grad = false) const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    const void* storage_id() const noexcept { return impl_.get(); }

    bool all_finite() const {
        for (double v : impl_->data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    static std::size_t product(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

private:
    struct Impl {
        std::vector<std::size_t> shape;
        std::vector<double> data;
        std::vector<double> grad; // empty means absent
        bool requires_grad = false;
    };

    static void validate_shape(const std::vector<std::size_t>& shape) {
        require(!shape.empty() && shape.size() <= 3, ErrorCode::invalid_shape,
                "rank must be 1-3, got " + std::to_string(shape.size()));
        for (std::size_t d : shape) {
            require(d >= 1, ErrorCode::invalid_shape, "all dims must be >= 1");
        }
    }

    std::shared_ptr<Impl> impl_;
};

inline Tensor tensor_create(std::vector<std::size_t> shape, std::vector<double> values,
                            bool requires_grad = false) {
    return Tensor::from_values(std::move(shape), std::move(values), requires_grad);
}

enum class EwKind : std::uint8_t { add, sub, mul, gelu, sigmoid, scale };

/// Reverse-mode tape. Ops append nodes when recording and an input needs a
/// gradient; backward() walks the tape once in reverse append order.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const noexcept { return recording_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    void backward(const Tensor& loss) {
        require(loss.defined() && loss.size() == 1, ErrorCode::not_scalar,
                "backward requires a scalar loss");
        auto it = producer_.find(loss.storage_id());
        require(it != producer_.end(), ErrorCode::detached_graph,
                "loss has no recorded provenance in this graph");

        // Per-call adjoint buffers keep repeated backward() calls additive.
        std::vector<std::vector<double>> adjoint(nodes_.size());
        adjoint[it->second].assign(loss.size(), 0.0);
        adjoint[it->second][0] = 1.0;

        for (std::size_t ni = nodes_.size(); ni-- > 0;) {
            if (adjoint[ni].empty()) continue;
            Node& node = nodes_[ni];
            const std::vector<double>& up = adjoint[ni];
            if (node.out.requires_grad()) {
                auto& g = node.out.grad_buffer();
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
            }
            propagate(node, up, adjoint);
        }
    }

private:
    friend Tensor matmul(Graph&, const Tensor&, const Tensor&);
    friend Tensor matmul_nt(Graph&, const Tensor&, const Tensor&);
    friend Tensor bmm(Graph&, const Tensor&, const Tensor&);
    friend Tensor bmm_nt(Graph&, const Tensor&, const Tensor&);
    friend Tensor split_heads(Graph&, const Tensor&, int);
    friend Tensor merge_heads(Graph&, const Tensor&);
    friend Tensor elementwise(Graph&, EwKind, const Tensor&, const Tensor&);
    friend Tensor elementwise(Graph&, EwKind, const Tensor&, double);
    friend Tensor elementwise(Graph&, EwKind, const Tensor&);
    friend Tensor add_row_vector(Graph&, const Tensor&, const Tensor&);
    friend Tensor softmax_rows(Graph&, const Tensor&);
    friend Tensor softmax_causal(Graph&, const Tensor&);
    friend Tensor layer_norm(Graph&, const Tensor&, const Tensor&, const Tensor&, double);
    friend Tensor gather_rows(Graph&, const Tensor&, std::vector<int>);
    friend Tensor reduce_sum(Graph&, const Tensor&);
    friend Tensor reshape(Graph&, const Tensor&, std::vector<std::size_t>);
    friend Tensor cross_entropy(Graph&, const Tensor&, std::span<const int>);

    enum class Op : std::uint8_t {
        matmul,
        matmul_nt,
        bmm,
        bmm_nt,
        split_heads,
        merge_heads,
        ew_add,
        ew_sub,
        ew_mul,
        ew_gelu,
        ew_sigmoid,
        ew_scale,
        add_row_vector,
        softmax_rows,
        softmax_causal,
        layer_norm,
        gather_rows,
        reduce_sum,
        reshape,
        cross_entropy,
    };

    struct Node {
        Op op;
        Tensor out;
        Tensor a;
        Tensor b;
        Tensor c;
        double scalar = 0.0;          // ew_scale factor / layer_norm eps
        int heads = 0;                // split_heads
        std::vector<int> indices;     // gather_rows / cross_entropy targets
        std::vector<double> cache;    // layer_norm {mean,rstd} per row; cross_entropy probs
    };

    bool should_record(std::initializer_list<const Tensor*> inputs) const {
        if (!recording_) return false;
        for (const Tensor* t : inputs) {
            if (t->defined() && t->requires_grad()) return true;
        }
        return false;
    }

    void record(Node node) {
        node.out.set_requires_grad(true);
        producer_[node.out.storage_id()] = nodes_.size();
        nodes_.push_back(std::move(node));
    }

    // Accumulate `contribution` into the adjoint of `t` (if it is a node
    // output) or into its grad field (if it is a requires_grad leaf).
    template <class Fn>
    void accumulate(const Tensor& t, std::vector<std::vector<double>>& adjoint, Fn&& emit) {
        if (!t.defined()) return;
        auto it = producer_.find(t.storage_id());
        if (it != producer_.end()) {
            auto& buf = adjoint[it->second];
            if (buf.empty()) buf.assign(t.size(), 0.0);
            emit(buf.data());
        } else if (t.requires_grad()) {
            Tensor leaf = t;
            emit(leaf.grad_buffer().data());
        }
    }

    void propagate(Node& node, const std::vector<double>& up, std::vector<std::vector<double>>& adjoint);

    bool recording_;
    std::vector<Node> nodes_;
    std::unordered_map<const void*, std::size_t> producer_;
};

namespace detail {

inline void check_matrix(const Tensor& t, const char* what) {
    require(t.rank() == 2, ErrorCode::shape_mismatch, std::string(what) + " must be rank-2");
}

inline void check_batched(const Tensor& t, const char* what) {
    require(t.rank() == 3, ErrorCode::shape_mismatch, std::string(what) + " must be rank-3");
}

} // namespace detail

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul lhs");
    detail::check_matrix(b, "matmul rhs");
    require(a.dim(1) == b.dim(0), ErrorCode::shape_mismatch,
            "matmul inner dims differ: " + std::to_string(a.dim(1)) + " vs " + std::to_string(b.dim(0)));
    Tensor out = Tensor::zeros({a.dim(0), b.dim(1)});
    detail::mm_nn(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
    if (g.should_record({&a, &b})) g.record({Graph::Op::matmul, out, a, b, {}});
    return out;
}

/// a [m,k] times b [n,k] transposed -> [m,n]
inline Tensor matmul_nt(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul_nt lhs");
    detail::check_matrix(b, "matmul_nt rhs");
    require(a.dim(1) == b.dim(1), ErrorCode::shape_mismatch, "matmul_nt inner dims differ");
    Tensor out = Tensor::zeros({a.dim(0), b.dim(0)});
    detail::mm_nt(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(0));
    if (g.should_record({&a, &b})) g.record({Graph::Op::matmul_nt, out, a, b, {}});
    return out;
}

inline Tensor bmm(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_batched(a, "bmm lhs");
    detail::check_batched(b, "bmm rhs");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1), ErrorCode::shape_mismatch, "bmm dims differ");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out = Tensor::zeros({batch, m, n});
    for (std::size_t h = 0; h < batch; ++h) {
        detail::mm_nn(a.data() + h * m * k, b.data() + h * k * n, out.data() + h * m * n, m, k, n);
    }
    if (g.should_record({&a, &b})) g.record({Graph::Op::bmm, out, a, b, {}});
    return out;
}

inline Tensor bmm_nt(Graph& g, const Tensor& a, const Tensor& b) {
    detail::check_batched(a, "bmm_nt lhs");
    detail::check_batched(b, "bmm_nt rhs");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2), ErrorCode::shape_mismatch, "bmm_nt dims differ");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor out = Tensor::zeros({batch, m, n});
    for (std::size_t h = 0; h < batch; ++h) {
        detail::mm_nt(a.data() + h * m * k, b.data() + h * n * k, out.data() + h * m * n, m, k, n);
    }
    if (g.should_record({&a, &b})) g.record({Graph::Op::bmm_nt, out, a, b, {}});
    return out;
}

/// [T, d] -> [n_heads, T, d/n_heads]
inline Tensor split_heads(Graph& g, const Tensor& x, int n_heads) {
    detail::check_matrix(x, "split_heads input");
    require(n_heads >= 1 && x.dim(1) % static_cast<std::size_t>(n_heads) == 0, ErrorCode::shape_mismatch,
            "d_model not divisible by n_heads");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    const std::size_t hd = d / static_cast<std::size_t>(n_heads);
    Tensor out = Tensor::zeros({static_cast<std::size_t>(n_heads), rows, hd});
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
        for (std::size_t t = 0; t < rows; ++t) {
            const double* src = x.data() + t * d + h * hd;
            double* dst = out.data() + (h * rows + t) * hd;
            std::copy(src, src + hd, dst);
        }
    }
    if (g.should_record({&x})) {
        Graph::Node node{Graph::Op::split_heads, out, x, {}, {}};
        node.heads = n_heads;
        g.record(std::move(node));
    }
    return out;
}

/// [H, T, hd] -> [T, H*hd]
inline Tensor merge_heads(Graph& g, const Tensor& x) {
    detail::check_batched(x, "merge_heads input");
    const std::size_t heads = x.dim(0), rows = x.dim(1), hd = x.dim(2);
    Tensor out = Tensor::zeros({rows, heads * hd});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < rows; ++t) {
            const double* src = x.data() + (h * rows + t) * hd;
            double* dst = out.data() + t * heads * hd + h * hd;
            std::copy(src, src + hd, dst);
        }
    }
    if (g.should_record({&x})) g.record({Graph::Op::merge_heads, out, x, {}, {}});
    return out;
}

inline Tensor elementwise(Graph& g, EwKind kind, const Tensor& a, const Tensor& b) {
    require(kind == EwKind::add || kind == EwKind::sub || kind == EwKind::mul, ErrorCode::shape_mismatch,
            "binary elementwise requires add/sub/mul");
    require(a.shape() == b.shape(), ErrorCode::shape_mismatch, "elementwise operand shapes differ");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    switch (kind) {
        case EwKind::add:
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
            break;
        case EwKind::sub:
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
            break;
        case EwKind::mul:
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
            break;
        default: break;
    }
    const Graph::Op op = kind == EwKind::add   ? Graph::Op::ew_add
                         : kind == EwKind::sub ? Graph::Op::ew_sub
                                               : Graph::Op::ew_mul;
    if (g.should_record({&a, &b})) g.record({op, out, a, b, {}});
    return out;
}

inline Tensor elementwise(Graph& g, EwKind kind, const Tensor& a, double scalar_rhs) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    double grad_factor = 1.0; // d out / d a; scalar add/sub pass gradient through
    switch (kind) {
        case EwKind::add:
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + scalar_rhs;
            break;
        case EwKind::sub:
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - scalar_rhs;
            break;
        case EwKind::mul:
        case EwKind::scale:
            for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * scalar_rhs;
            grad_factor = scalar_rhs;
            break;
        default:
            fail(ErrorCode::shape_mismatch, "scalar rhs requires add/sub/mul/scale");
    }
    if (g.should_record({&a})) {
        Graph::Node node{Graph::Op::ew_scale, out, a, {}, {}};
        node.scalar = grad_factor;
        g.record(std::move(node));
    }
    return out;
}

inline Tensor elementwise(Graph& g, EwKind kind, const Tensor& a) {
    require(kind == EwKind::gelu || kind == EwKind::sigmoid, ErrorCode::shape_mismatch,
            "unary elementwise requires gelu/sigmoid");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    if (kind == EwKind::gelu) {
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = detail::gelu_value(a.data()[i]);
        if (g.should_record({&a})) g.record({Graph::Op::ew_gelu, out, a, {}, {}});
    } else {
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = detail::sigmoid_value(a.data()[i]);
        if (g.should_record({&a})) g.record({Graph::Op::ew_sigmoid, out, a, {}, {}});
    }
    return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) { return elementwise(g, EwKind::add, a, b); }
inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) { return elementwise(g, EwKind::sub, a, b); }
inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) { return elementwise(g, EwKind::mul, a, b); }
inline Tensor add(Graph& g, const Tensor& a, double b) { return elementwise(g, EwKind::add, a, b); }
inline Tensor sub(Graph& g, const Tensor& a, double b) { return elementwise(g, EwKind::sub, a, b); }
inline Tensor gelu(Graph& g, const Tensor& a) { return elementwise(g, EwKind::gelu, a); }
inline Tensor sigmoid(Graph& g, const Tensor& a) { return elementwise(g, EwKind::sigmoid, a); }
inline Tensor scale(Graph& g, const Tensor& a, double s) { return elementwise(g, EwKind::scale, a, s); }

/// m [r,n] + v [n] broadcast over rows
inline Tensor add_row_vector(Graph& g, const Tensor& m, const Tensor& v) {
    detail::check_matrix(m, "add_row_vector lhs");
    require(v.rank() == 1 && v.dim(0) == m.dim(1), ErrorCode::shape_mismatch,
            "row vector length must equal column count");
    Tensor out = Tensor::zeros(m.shape());
    const std::size_t rows = m.dim(0), n = m.dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* src = m.data() + i * n;
        double* dst = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] + v.data()[j];
    }
    if (g.should_record({&m, &v})) g.record({Graph::Op::add_row_vector, out, m, v, {}});
    return out;
}

inline Tensor softmax_rows(Graph& g, const Tensor& x) {
    detail::check_matrix(x, "softmax_rows input");
    require(x.all_finite(), ErrorCode::non_finite_input, "softmax_rows input must be finite");
    const std::size_t rows = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* src = x.data() + i * n;
        double* dst = out.data() + i * n;
        double mx = src[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
    }
    if (g.should_record({&x})) g.record({Graph::Op::softmax_rows, out, x, {}, {}});
    return out;
}

/// Row-wise softmax over scores [H,T,T] restricted to j <= i; entries above
/// the diagonal are exactly zero, so later positions can never leak backward.
inline Tensor softmax_causal(Graph& g, const Tensor& scores) {
    detail::check_batched(scores, "softmax_causal input");
    require(scores.dim(1) == scores.dim(2), ErrorCode::shape_mismatch, "causal scores must be square");
    const std::size_t heads = scores.dim(0), t = scores.dim(1);
    Tensor out = Tensor::zeros(scores.shape());
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < t; ++i) {
            const double* src = scores.data() + (h * t + i) * t;
            double* dst = out.data() + (h * t + i) * t;
            double mx = src[0];
            for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, src[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                dst[j] = std::exp(src[j] - mx);
                sum += dst[j];
            }
            const double inv = 1.0 / sum;
            for (std::size_t j = 0; j <= i; ++j) dst[j] *= inv;
        }
    }
    if (g.should_record({&scores})) g.record({Graph::Op::softmax_causal, out, scores, {}, {}});
    return out;
}

inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    detail::check_matrix(x, "layer_norm input");
    require(eps > 0.0, ErrorCode::invalid_shape, "layer_norm eps must be > 0");
    const std::size_t rows = x.dim(0), n = x.dim(1);
    require(gain.rank() == 1 && gain.dim(0) == n, ErrorCode::shape_mismatch, "layer_norm gain length");
    require(bias.rank() == 1 && bias.dim(0) == n, ErrorCode::shape_mismatch, "layer_norm bias length");
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> cache(rows * 2);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* src = x.data() + i * n;
        double* dst = out.data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += src[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = src[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double rstd = 1.0 / std::sqrt(var + eps);
        cache[2 * i] = mean;
        cache[2 * i + 1] = rstd;
        for (std::size_t j = 0; j < n; ++j) {
            dst[j] = (src[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
        }
    }
    if (g.should_record({&x, &gain, &bias})) {
        Graph::Node node{Graph::Op::layer_norm, out, x, gain, bias};
        node.scalar = eps;
        node.cache = std::move(cache);
        g.record(std::move(node));
    }
    return out;
}

/// out[i,:] = m[rows[i],:]; repeated indices accumulate in the backward pass
inline Tensor gather_rows(Graph& g, const Tensor& m, std::vector<int> rows) {
    detail::check_matrix(m, "gather_rows input");
    require(!rows.empty(), ErrorCode::empty_input, "gather_rows needs at least one row");
    const std::size_t n = m.dim(1);
    for (int r : rows) {
        require(r >= 0 && static_cast<std::size_t>(r) < m.dim(0), ErrorCode::invalid_shape,
                "gather_rows index out of range");
    }
    Tensor out = Tensor::zeros({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* src = m.data() + static_cast<std::size_t>(rows[i]) * n;
        std::copy(src, src + n, out.data() + i * n);
    }
    if (g.should_record({&m})) {
        Graph::Node node{Graph::Op::gather_rows, out, m, {}, {}};
        node.indices = std::move(rows);
        g.record(std::move(node));
    }
    return out;
}

inline Tensor reduce_sum(Graph& g, const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s);
    if (g.should_record({&x})) g.record({Graph::Op::reduce_sum, out, x, {}, {}});
    return out;
}

/// Same flat data under a new shape (copying; identity backward).
inline Tensor reshape(Graph& g, const Tensor& x, std::vector<std::size_t> shape) {
    require(Tensor::product(shape) == x.size(), ErrorCode::shape_mismatch,
            "reshape must preserve element count");
    Tensor out = Tensor::from_values(std::move(shape),
                                     std::vector<double>(x.values().begin(), x.values().end()));
    if (g.should_record({&x})) g.record({Graph::Op::reshape, out, x, {}, {}});
    return out;
}

inline Tensor reduce_mean(Graph& g, const Tensor& x) {
    return scale(g, reduce_sum(g, x), 1.0 / static_cast<double>(x.size()));
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` [N,C]; log-sum-exp stabilized. Gradient at the logits is
/// (softmax - onehot) / N.
inline Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const int> targets) {
    detail::check_matrix(logits, "cross_entropy logits");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    require(targets.size() == n, ErrorCode::shape_mismatch, "target count must equal logit rows");
    for (int t : targets) {
        require(t >= 0 && static_cast<std::size_t>(t) < c, ErrorCode::target_out_of_range,
                "class target " + std::to_string(t) + " outside [0," + std::to_string(c) + ")");
    }
    std::vector<double> probs(n * c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data() + i * c;
        double* prow = probs.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < c; ++j) prow[j] *= inv;
        total += std::log(sum) + mx - row[targets[i]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    if (g.should_record({&logits})) {
        Graph::Node node{Graph::Op::cross_entropy, out, logits, {}, {}};
        node.indices.assign(targets.begin(), targets.end());
        node.cache = std::move(probs);
        g.record(std::move(node));
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void Graph::propagate(Node& node, const std::vector<double>& up,
                             std::vector<std::vector<double>>& adjoint) {
    const double* dy = up.data();
    switch (node.op) {
        case Op::matmul: {
            const std::size_t m = node.a.dim(0), k = node.a.dim(1), n = node.b.dim(1);
            accumulate(node.a, adjoint,
                       [&](double* da) { detail::mm_nt(dy, node.b.data(), da, m, n, k); });
            accumulate(node.b, adjoint,
                       [&](double* db) { detail::mm_tn(node.a.data(), dy, db, m, k, n); });
            break;
        }
        case Op::matmul_nt: {
            const std::size_t m = node.a.dim(0), k = node.a.dim(1), n = node.b.dim(0);
            accumulate(node.a, adjoint,
                       [&](double* da) { detail::mm_nn(dy, node.b.data(), da, m, n, k); });
            accumulate(node.b, adjoint,
                       [&](double* db) { detail::mm_tn(dy, node.a.data(), db, m, n, k); });
            break;
        }
        case Op::bmm: {
            const std::size_t batch = node.a.dim(0), m = node.a.dim(1), k = node.a.dim(2),
                              n = node.b.dim(2);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t h = 0; h < batch; ++h) {
                    detail::mm_nt(dy + h * m * n, node.b.data() + h * k * n, da + h * m * k, m, n, k);
                }
            });
            accumulate(node.b, adjoint, [&](double* db) {
                for (std::size_t h = 0; h < batch; ++h) {
                    detail::mm_tn(node.a.data() + h * m * k, dy + h * m * n, db + h * k * n, m, k, n);
                }
            });
            break;
        }
        case Op::bmm_nt: {
            const std::size_t batch = node.a.dim(0), m = node.a.dim(1), k = node.a.dim(2),
                              n = node.b.dim(1);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t h = 0; h < batch; ++h) {
                    detail::mm_nn(dy + h * m * n, node.b.data() + h * n * k, da + h * m * k, m, n, k);
                }
            });
            accumulate(node.b, adjoint, [&](double* db) {
                for (std::size_t h = 0; h < batch; ++h) {
                    detail::mm_tn(dy + h * m * n, node.a.data() + h * m * k, db + h * n * k, m, n, k);
                }
            });
            break;
        }
        case Op::split_heads: {
            const std::size_t rows = node.a.dim(0), d = node.a.dim(1);
            const std::size_t heads = static_cast<std::size_t>(node.heads), hd = d / heads;
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t t = 0; t < rows; ++t) {
                        const double* src = dy + (h * rows + t) * hd;
                        double* dst = da + t * d + h * hd;
                        for (std::size_t i = 0; i < hd; ++i) dst[i] += src[i];
                    }
                }
            });
            break;
        }
        case Op::merge_heads: {
            const std::size_t heads = node.a.dim(0), rows = node.a.dim(1), hd = node.a.dim(2);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t t = 0; t < rows; ++t) {
                        const double* src = dy + t * heads * hd + h * hd;
                        double* dst = da + (h * rows + t) * hd;
                        for (std::size_t i = 0; i < hd; ++i) dst[i] += src[i];
                    }
                }
            });
            break;
        }
        case Op::ew_add: {
            const std::size_t n = node.out.size();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) da[i] += dy[i];
            });
            accumulate(node.b, adjoint, [&](double* db) {
                for (std::size_t i = 0; i < n; ++i) db[i] += dy[i];
            });
            break;
        }
        case Op::ew_sub: {
            const std::size_t n = node.out.size();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) da[i] += dy[i];
            });
            accumulate(node.b, adjoint, [&](double* db) {
                for (std::size_t i = 0; i < n; ++i) db[i] -= dy[i];
            });
            break;
        }
        case Op::ew_mul: {
            const std::size_t n = node.out.size();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * node.b.data()[i];
            });
            accumulate(node.b, adjoint, [&](double* db) {
                for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * node.a.data()[i];
            });
            break;
        }
        case Op::ew_gelu: {
            const std::size_t n = node.out.size();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * detail::gelu_derivative(node.a.data()[i]);
            });
            break;
        }
        case Op::ew_sigmoid: {
            const std::size_t n = node.out.size();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double s = node.out.data()[i];
                    da[i] += dy[i] * s * (1.0 - s);
                }
            });
            break;
        }
        case Op::ew_scale: {
            const std::size_t n = node.out.size();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * node.scalar;
            });
            break;
        }
        case Op::add_row_vector: {
            const std::size_t rows = node.a.dim(0), n = node.a.dim(1);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < rows * n; ++i) da[i] += dy[i];
            });
            accumulate(node.b, adjoint, [&](double* db) {
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < n; ++j) db[j] += dy[i * n + j];
                }
            });
            break;
        }
        case Op::softmax_rows: {
            const std::size_t rows = node.out.dim(0), n = node.out.dim(1);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* p = node.out.data() + i * n;
                    const double* dyi = dy + i * n;
                    double inner = detail::dot(dyi, p, n);
                    double* dai = da + i * n;
                    for (std::size_t j = 0; j < n; ++j) dai[j] += p[j] * (dyi[j] - inner);
                }
            });
            break;
        }
        case Op::softmax_causal: {
            const std::size_t heads = node.out.dim(0), t = node.out.dim(1);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t i = 0; i < t; ++i) {
                        const std::size_t base = (h * t + i) * t;
                        const double* p = node.out.data() + base;
                        const double* dyi = dy + base;
                        double inner = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) inner += dyi[j] * p[j];
                        double* dai = da + base;
                        for (std::size_t j = 0; j <= i; ++j) dai[j] += p[j] * (dyi[j] - inner);
                    }
                }
            });
            break;
        }
        case Op::layer_norm: {
            const std::size_t rows = node.a.dim(0), n = node.a.dim(1);
            const double* gain = node.b.data();
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < rows; ++i) {
                    const double mean = node.cache[2 * i];
                    const double rstd = node.cache[2 * i + 1];
                    const double* src = node.a.data() + i * n;
                    const double* dyi = dy + i * n;
                    double sum_dg = 0.0, sum_dgx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double xhat = (src[j] - mean) * rstd;
                        const double dg = dyi[j] * gain[j];
                        sum_dg += dg;
                        sum_dgx += dg * xhat;
                    }
                    const double inv_n = 1.0 / static_cast<double>(n);
                    double* dai = da + i * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double xhat = (src[j] - mean) * rstd;
                        const double dg = dyi[j] * gain[j];
                        dai[j] += rstd * (dg - inv_n * sum_dg - xhat * inv_n * sum_dgx);
                    }
                }
            });
            accumulate(node.b, adjoint, [&](double* dgain) {
                for (std::size_t i = 0; i < rows; ++i) {
                    const double mean = node.cache[2 * i];
                    const double rstd = node.cache[2 * i + 1];
                    const double* src = node.a.data() + i * n;
                    const double* dyi = dy + i * n;
                    for (std::size_t j = 0; j < n; ++j) dgain[j] += dyi[j] * (src[j] - mean) * rstd;
                }
            });
            accumulate(node.c, adjoint, [&](double* dbias) {
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* dyi = dy + i * n;
                    for (std::size_t j = 0; j < n; ++j) dbias[j] += dyi[j];
                }
            });
            break;
        }
        case Op::gather_rows: {
            const std::size_t n = node.a.dim(1);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < node.indices.size(); ++i) {
                    double* dst = da + static_cast<std::size_t>(node.indices[i]) * n;
                    const double* src = dy + i * n;
                    for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
                }
            });
            break;
        }
        case Op::reduce_sum: {
            accumulate(node.a, adjoint, [&](double* da) {
                const double v = dy[0];
                for (std::size_t i = 0; i < node.a.size(); ++i) da[i] += v;
            });
            break;
        }
        case Op::reshape: {
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < node.a.size(); ++i) da[i] += dy[i];
            });
            break;
        }
        case Op::cross_entropy: {
            const std::size_t n = node.a.dim(0), c = node.a.dim(1);
            const double inv_n = 1.0 / static_cast<double>(n);
            accumulate(node.a, adjoint, [&](double* da) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double* p = node.cache.data() + i * c;
                    double* dai = da + i * c;
                    const double w = dy[0] * inv_n;
                    for (std::size_t j = 0; j < c; ++j) dai[j] += w * p[j];
                    dai[static_cast<std::size_t>(node.indices[i])] -= w;
                }
            });
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient checker
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |cd|).
inline double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& point,
                         double h) {
    require(h > 0.0 && h <= 1e-3, ErrorCode::invalid_shape, "step size must be in (0, 1e-3]");
    Tensor x = point.clone(true);
    Graph g;
    Tensor loss = f(g, x);
    require(loss.size() == 1, ErrorCode::not_scalar, "grad_check function must be scalar-valued");
    g.backward(loss);
    require(x.has_grad(), ErrorCode::detached_graph, "function does not depend on the point");
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    double max_rel = 0.0;
    Tensor probe = point.clone(false);
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe.at(i);
        probe.at(i) = orig + h;
        Graph gp(false);
        const double fp = f(gp, probe).item();
        probe.at(i) = orig - h;
        Graph gm(false);
        const double fm = f(gm, probe).item();
        probe.at(i) = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace qgrade
