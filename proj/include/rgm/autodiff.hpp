// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Ops record onto the thread's active Tape (see TapeScope) whenever an input
// requires gradients; without an active tape they are plain forward numerics.
// Broadcasting follows one rule: shapes are right-aligned and a size-1 axis
// may expand to match the other operand.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rgm/core.hpp"
#include "rgm/rng.hpp"

namespace rgm::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

template <std::floating_point Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;  // empty until needed, otherwise same length as values
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
    }
};

template <std::floating_point Real>
class Tape;

template <std::floating_point Real>
class Tensor {
public:
    using Node = TensorNode<Real>;

    Tensor() : node_(std::make_shared<Node>()) {}

    Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<Node>()) {
        RGM_REQUIRE(numel(shape) == values.size(), "tensor: shape ", shape_str(shape),
                    " does not match value count ", values.size());
        node_->shape = std::move(shape);
        node_->values = std::move(values);
    }

    static Tensor zeros(Shape shape) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<Real>(n, Real(0)));
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), Real(1)); }
    static Tensor full(Shape shape, Real v) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<Real>(n, v));
    }
    static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

    static Tensor matrix(const std::vector<std::vector<Real>>& rows) {
        RGM_REQUIRE(!rows.empty(), "tensor: empty matrix");
        std::size_t m = rows[0].size();
        std::vector<Real> v;
        v.reserve(rows.size() * m);
        for (const auto& r : rows) {
            RGM_REQUIRE(r.size() == m, "tensor: ragged matrix rows");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor(Shape{rows.size(), m}, std::move(v));
    }

    static Tensor uniform(Shape shape, Rng& rng, Real lo, Real hi) {
        std::size_t n = numel(shape);
        std::vector<Real> v(n);
        for (auto& x : v) x = Real(rng.uniform(double(lo), double(hi)));
        return Tensor(std::move(shape), std::move(v));
    }

    static Tensor randn(Shape shape, Rng& rng, Real mean = Real(0), Real stddev = Real(1)) {
        std::size_t n = numel(shape);
        std::vector<Real> v(n);
        for (auto& x : v) x = Real(rng.normal(double(mean), double(stddev)));
        return Tensor(std::move(shape), std::move(v));
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t size() const { return node_->values.size(); }

    std::vector<Real>& values() { return node_->values; }
    const std::vector<Real>& values() const { return node_->values; }

    Real item() const {
        RGM_REQUIRE(size() == 1, "tensor: item() on non-scalar shape ", shape_str(shape()));
        return node_->values[0];
    }

    Real at(std::initializer_list<std::size_t> idx) const {
        RGM_REQUIRE(idx.size() == rank(), "tensor: at() rank mismatch");
        auto strides = row_major_strides(shape());
        std::size_t off = 0, ax = 0;
        for (std::size_t i : idx) off += i * strides[ax++];
        return node_->values[off];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<Real>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    std::vector<Real> grad_copy() const {
        if (node_->grad.empty()) return std::vector<Real>(size(), Real(0));
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }

    Tensor detached_copy() const { return Tensor(shape(), values()); }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;

    template <std::floating_point R>
    friend class Tape;
};

// Ordered record of primitive applications; entries appear in application
// order, which is a topological order of the data flow.
template <std::floating_point Real>
class Tape {
public:
    struct Entry {
        const char* op;
        std::shared_ptr<TensorNode<Real>> out;
        std::vector<std::shared_ptr<TensorNode<Real>>> inputs;
        std::function<void()> vjp;  // accumulates into input grads, reading out->grad
    };

    void record(const char* op, const Tensor<Real>& out,
                std::vector<std::shared_ptr<TensorNode<Real>>> inputs, std::function<void()> vjp) {
        entries_.push_back(Entry{op, out.node(), std::move(inputs), std::move(vjp)});
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

    // Reverse sweep from a scalar root. Grads of requires-grad leaves
    // accumulate across calls; intermediate grads are reset per call.
    void backward(const Tensor<Real>& root) {
        RGM_REQUIRE(root.size() == 1, "backward: root must be scalar, got shape ",
                    shape_str(root.shape()));
        std::unordered_set<const TensorNode<Real>*> needed;
        needed.insert(root.node().get());
        std::vector<char> active(entries_.size(), 0);
        for (std::size_t i = entries_.size(); i-- > 0;) {
            Entry& e = entries_[i];
            if (!needed.count(e.out.get())) continue;
            active[i] = 1;
            for (auto& in : e.inputs)
                if (in->requires_grad) needed.insert(in.get());
        }
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (active[i]) entries_[i].out->grad.assign(entries_[i].out->values.size(), Real(0));
        root.node()->ensure_grad();
        root.node()->grad[0] += Real(1);
        for (std::size_t i = entries_.size(); i-- > 0;)
            if (active[i]) entries_[i].vjp();
    }

private:
    std::vector<Entry> entries_;
};

template <std::floating_point Real>
inline Tape<Real>*& active_tape() {
    thread_local Tape<Real>* tape = nullptr;
    return tape;
}

template <std::floating_point Real>
class TapeScope {
public:
    explicit TapeScope(Tape<Real>& tape) : prev_(active_tape<Real>()) {
        active_tape<Real>() = &tape;
    }
    ~TapeScope() { active_tape<Real>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<Real>* prev_;
};

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <std::floating_point Real>
void accumulate(const std::shared_ptr<TensorNode<Real>>& node, const std::vector<Real>& g) {
    node->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
}

template <std::floating_point Real>
Tensor<Real> finish_op(const char* op, Tensor<Real> out,
                       std::initializer_list<Tensor<Real>> inputs, std::function<void()> vjp) {
    Tape<Real>* tape = active_tape<Real>();
    bool need = false;
    for (const auto& in : inputs) need = need || in.requires_grad();
    if (tape && need) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
        nodes.reserve(inputs.size());
        for (const auto& in : inputs) nodes.push_back(in.node());
        tape->record(op, out, std::move(nodes), std::move(vjp));
    }
    return out;
}

struct BroadcastPlan {
    Shape out_shape;
    std::vector<std::size_t> stride_a, stride_b;  // aligned to out rank, 0 on broadcast axes
};

inline BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
    std::size_t rank = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out_shape.assign(rank, 1);
    Shape ea(rank, 1), eb(rank, 1);
    std::copy(a.begin(), a.end(), ea.begin() + (rank - a.size()));
    std::copy(b.begin(), b.end(), eb.begin() + (rank - b.size()));
    for (std::size_t i = 0; i < rank; ++i) {
        RGM_REQUIRE(ea[i] == eb[i] || ea[i] == 1 || eb[i] == 1, op, ": shape mismatch ",
                    shape_str(a), " vs ", shape_str(b));
        plan.out_shape[i] = std::max(ea[i], eb[i]);
    }
    auto sa = row_major_strides(ea), sb = row_major_strides(eb);
    plan.stride_a.assign(rank, 0);
    plan.stride_b.assign(rank, 0);
    for (std::size_t i = 0; i < rank; ++i) {
        plan.stride_a[i] = (ea[i] == 1 && plan.out_shape[i] != 1) ? 0 : sa[i];
        plan.stride_b[i] = (eb[i] == 1 && plan.out_shape[i] != 1) ? 0 : sb[i];
    }
    return plan;
}

// Visits every element of `out_shape`, yielding (linear out index, offset into
// a, offset into b) with the given per-axis strides.
template <typename F>
void for_each_broadcast(const Shape& out_shape, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t total = numel(out_shape);
    const std::size_t rank = out_shape.size();
    if (rank == 0) {
        if (total) f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t lin = 0; lin < total; ++lin) {
        f(lin, oa, ob);
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out_shape[ax]) break;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

// (outer, n, inner) view of `shape` around `axis`.
struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
    RGM_REQUIRE(axis < shape.size(), op, ": axis ", axis, " out of range for ", shape_str(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// raw dense matmul helpers (row-major)
template <std::floating_point Real>
void matmul_nn(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k,
               std::size_t m) {
    std::fill(c, c + n * m, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// c(n,m) += a(n,k) * b(m,k)^T
template <std::floating_point Real>
void matmul_nt_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k,
                   std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const Real* brow = b + j * k;
            Real acc = Real(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c(k,m) += a(n,k)^T * b(n,m)
template <std::floating_point Real>
void matmul_tn_acc(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k,
                   std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const Real* arow = a + i * k;
        const Real* brow = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            Real* crow = c + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitives

template <std::floating_point Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    RGM_REQUIRE(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                "matmul: incompatible shapes ", shape_str(a.shape()), " vs ",
                shape_str(b.shape()));
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor<Real> out = Tensor<Real>::zeros({n, m});
    detail::matmul_nn(a.values().data(), b.values().data(), out.values().data(), n, k, m);
    auto an = a.node(), bn = b.node(), on = out.node();
    return detail::finish_op<Real>("matmul", out, {a, b}, [an, bn, on, n, k, m] {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::matmul_nt_acc(on->grad.data(), bn->values.data(), an->grad.data(), n, m, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::matmul_tn_acc(an->values.data(), on->grad.data(), bn->grad.data(), n, k, m);
        }
    });
}

template <std::floating_point Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
    RGM_REQUIRE(a.rank() == 2, "transpose: expected rank-2, got ", shape_str(a.shape()));
    const std::size_t n = a.dim(0), m = a.dim(1);
    Tensor<Real> out = Tensor<Real>::zeros({m, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.values()[j * n + i] = a.values()[i * m + j];
    auto an = a.node(), on = out.node();
    return detail::finish_op<Real>("transpose", out, {a}, [an, on, n, m] {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += on->grad[j * n + i];
    });
}

namespace detail {

enum class BinKind { add, sub, mul, div };

template <std::floating_point Real>
Tensor<Real> binary_op(const char* name, BinKind kind, const Tensor<Real>& a,
                       const Tensor<Real>& b) {
    BroadcastPlan plan = broadcast_plan(name, a.shape(), b.shape());
    Tensor<Real> out = Tensor<Real>::zeros(plan.out_shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for_each_broadcast(plan.out_shape, plan.stride_a, plan.stride_b,
                       [&](std::size_t lin, std::size_t oa, std::size_t ob) {
                           switch (kind) {
                               case BinKind::add: ov[lin] = av[oa] + bv[ob]; break;
                               case BinKind::sub: ov[lin] = av[oa] - bv[ob]; break;
                               case BinKind::mul: ov[lin] = av[oa] * bv[ob]; break;
                               case BinKind::div:
                                   RGM_REQUIRE(bv[ob] != Real(0), "divide: zero divisor (inputs "
                                                                  "must be eps-guarded)");
                                   ov[lin] = av[oa] / bv[ob];
                                   break;
                           }
                       });
    auto an = a.node(), bn = b.node(), on = out.node();
    return finish_op<Real>(name, out, {a, b}, [an, bn, on, plan, kind] {
        const bool ga = an->requires_grad, gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        for_each_broadcast(plan.out_shape, plan.stride_a, plan.stride_b,
                           [&](std::size_t lin, std::size_t oa, std::size_t ob) {
                               const Real g = on->grad[lin];
                               switch (kind) {
                                   case BinKind::add:
                                       if (ga) an->grad[oa] += g;
                                       if (gb) bn->grad[ob] += g;
                                       break;
                                   case BinKind::sub:
                                       if (ga) an->grad[oa] += g;
                                       if (gb) bn->grad[ob] -= g;
                                       break;
                                   case BinKind::mul:
                                       if (ga) an->grad[oa] += g * bn->values[ob];
                                       if (gb) bn->grad[ob] += g * an->values[oa];
                                       break;
                                   case BinKind::div: {
                                       const Real d = bn->values[ob];
                                       if (ga) an->grad[oa] += g / d;
                                       if (gb) bn->grad[ob] -= g * an->values[oa] / (d * d);
                                       break;
                                   }
                               }
                           });
    });
}

}  // namespace detail

template <std::floating_point Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op("add", detail::BinKind::add, a, b);
}
template <std::floating_point Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op("sub", detail::BinKind::sub, a, b);
}
template <std::floating_point Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op("mul", detail::BinKind::mul, a, b);
}
template <std::floating_point Real>
Tensor<Real> divide(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_op("divide", detail::BinKind::div, a, b);
}

// out = scale * x + shift, elementwise with scalar coefficients
template <std::floating_point Real>
Tensor<Real> affine(const Tensor<Real>& x, Real scale, Real shift) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = scale * x.values()[i] + shift;
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("affine", out, {x}, [xn, on, scale] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += scale * on->grad[i];
    });
}

template <std::floating_point Real>
Tensor<Real> exp(const Tensor<Real>& x) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.values()[i] = std::exp(x.values()[i]);
        RGM_REQUIRE(std::isfinite(out.values()[i]), "exp: non-finite result from input ",
                    x.values()[i]);
    }
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("exp", out, {x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            xn->grad[i] += on->grad[i] * on->values[i];
    });
}

template <std::floating_point Real>
Tensor<Real> log(const Tensor<Real>& x) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        RGM_REQUIRE(x.values()[i] > Real(0), "log: non-positive input ", x.values()[i],
                    " (inputs must be eps-guarded)");
        out.values()[i] = std::log(x.values()[i]);
    }
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("log", out, {x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            xn->grad[i] += on->grad[i] / xn->values[i];
    });
}

template <std::floating_point Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        RGM_REQUIRE(x.values()[i] >= Real(0), "sqrt: negative input ", x.values()[i]);
        out.values()[i] = std::sqrt(x.values()[i]);
    }
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("sqrt", out, {x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            xn->grad[i] += on->grad[i] * Real(0.5) / on->values[i];
    });
}

template <std::floating_point Real>
Tensor<Real> relu(const Tensor<Real>& x) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out.values()[i] = x.values()[i] > Real(0) ? x.values()[i] : Real(0);
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("relu", out, {x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
            if (xn->values[i] > Real(0)) xn->grad[i] += on->grad[i];
    });
}

template <std::floating_point Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
    auto split = detail::split_axis("softmax", x.shape(), axis);
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
            const std::size_t base = o * split.n * split.inner + in;
            Real mx = -std::numeric_limits<Real>::infinity();
            for (std::size_t j = 0; j < split.n; ++j)
                mx = std::max(mx, xv[base + j * split.inner]);
            Real sum = Real(0);
            for (std::size_t j = 0; j < split.n; ++j) {
                const Real e = std::exp(xv[base + j * split.inner] - mx);
                ov[base + j * split.inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < split.n; ++j) ov[base + j * split.inner] /= sum;
        }
    }
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("softmax", out, {x}, [xn, on, split] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o) {
            for (std::size_t in = 0; in < split.inner; ++in) {
                const std::size_t base = o * split.n * split.inner + in;
                Real dot = Real(0);
                for (std::size_t j = 0; j < split.n; ++j) {
                    const std::size_t k = base + j * split.inner;
                    dot += on->grad[k] * on->values[k];
                }
                for (std::size_t j = 0; j < split.n; ++j) {
                    const std::size_t k = base + j * split.inner;
                    xn->grad[k] += on->values[k] * (on->grad[k] - dot);
                }
            }
        }
    });
}

template <std::floating_point Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
    RGM_REQUIRE(!parts.empty(), "concat: no inputs");
    const Shape& first = parts[0].shape();
    RGM_REQUIRE(axis < first.size(), "concat: axis ", axis, " out of range for ",
                shape_str(first));
    Shape out_shape = first;
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        RGM_REQUIRE(p.rank() == first.size(), "concat: rank mismatch ", shape_str(p.shape()),
                    " vs ", shape_str(first));
        for (std::size_t i = 0; i < first.size(); ++i)
            RGM_REQUIRE(i == axis || p.shape()[i] == first[i], "concat: shape mismatch ",
                        shape_str(p.shape()), " vs ", shape_str(first));
        total_axis += p.shape()[axis];
    }
    out_shape[axis] = total_axis;
    Tensor<Real> out = Tensor<Real>::zeros(out_shape);
    auto osplit = detail::split_axis("concat", out_shape, axis);
    std::size_t axis_base = 0;
    for (const auto& p : parts) {
        const std::size_t pn = p.shape()[axis];
        for (std::size_t o = 0; o < osplit.outer; ++o)
            for (std::size_t j = 0; j < pn; ++j)
                std::copy_n(p.values().data() + (o * pn + j) * osplit.inner, osplit.inner,
                            out.values().data() +
                                (o * osplit.n + axis_base + j) * osplit.inner);
        axis_base += pn;
    }
    bool need = false;
    for (const auto& p : parts) need = need || p.requires_grad();
    Tape<Real>* tape = active_tape<Real>();
    if (tape && need) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode<Real>>> nodes;
        std::vector<std::size_t> sizes;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            sizes.push_back(p.shape()[axis]);
        }
        auto on = out.node();
        auto nodes_copy = nodes;
        tape->record("concat", out, std::move(nodes), [nodes_copy, sizes, on, osplit] {
            std::size_t base = 0;
            for (std::size_t pi = 0; pi < nodes_copy.size(); ++pi) {
                auto& node = nodes_copy[pi];
                const std::size_t pn = sizes[pi];
                if (node->requires_grad) {
                    node->ensure_grad();
                    for (std::size_t o = 0; o < osplit.outer; ++o)
                        for (std::size_t j = 0; j < pn; ++j) {
                            const Real* src =
                                on->grad.data() + (o * osplit.n + base + j) * osplit.inner;
                            Real* dst = node->grad.data() + (o * pn + j) * osplit.inner;
                            for (std::size_t q = 0; q < osplit.inner; ++q) dst[q] += src[q];
                        }
                }
                base += pn;
            }
        });
    }
    return out;
}

// Rectangular block of a rank-2 tensor.
template <std::floating_point Real>
Tensor<Real> block2d(const Tensor<Real>& x, std::size_t r0, std::size_t c0, std::size_t h,
                     std::size_t w) {
    RGM_REQUIRE(x.rank() == 2, "block2d: expected rank-2, got ", shape_str(x.shape()));
    RGM_REQUIRE(r0 + h <= x.dim(0) && c0 + w <= x.dim(1), "block2d: block out of range");
    const std::size_t cols = x.dim(1);
    Tensor<Real> out = Tensor<Real>::zeros({h, w});
    for (std::size_t i = 0; i < h; ++i)
        std::copy_n(x.values().data() + (r0 + i) * cols + c0, w, out.values().data() + i * w);
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("block2d", out, {x}, [xn, on, r0, c0, h, w, cols] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                xn->grad[(r0 + i) * cols + c0 + j] += on->grad[i * w + j];
    });
}

namespace detail {
inline Shape reduced_shape(const Shape& in, std::size_t axis, bool keepdims) {
    Shape s = in;
    if (keepdims) {
        s[axis] = 1;
    } else {
        s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
        if (s.empty()) s = {1};
    }
    return s;
}
}  // namespace detail

template <std::floating_point Real>
Tensor<Real> reduce_sum(const Tensor<Real>& x, std::size_t axis, bool keepdims = false) {
    auto split = detail::split_axis("reduce_sum", x.shape(), axis);
    Tensor<Real> out = Tensor<Real>::zeros(detail::reduced_shape(x.shape(), axis, keepdims));
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t j = 0; j < split.n; ++j)
            for (std::size_t in = 0; in < split.inner; ++in)
                ov[o * split.inner + in] += xv[(o * split.n + j) * split.inner + in];
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("reduce_sum", out, {x}, [xn, on, split] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t j = 0; j < split.n; ++j)
                for (std::size_t in = 0; in < split.inner; ++in)
                    xn->grad[(o * split.n + j) * split.inner + in] +=
                        on->grad[o * split.inner + in];
    });
}

// Max along one axis; gradient routed to the argmax, ties to the lowest index.
template <std::floating_point Real>
Tensor<Real> reduce_max(const Tensor<Real>& x, std::size_t axis, bool keepdims = false) {
    auto split = detail::split_axis("reduce_max", x.shape(), axis);
    RGM_REQUIRE(split.n > 0, "reduce_max: empty axis");
    Tensor<Real> out = Tensor<Real>::zeros(detail::reduced_shape(x.shape(), axis, keepdims));
    auto argmax = std::make_shared<std::vector<std::size_t>>(split.outer * split.inner, 0);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
            std::size_t best = 0;
            Real bv = xv[o * split.n * split.inner + in];
            for (std::size_t j = 1; j < split.n; ++j) {
                const Real v = xv[(o * split.n + j) * split.inner + in];
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            ov[o * split.inner + in] = bv;
            (*argmax)[o * split.inner + in] = best;
        }
    }
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("reduce_max", out, {x}, [xn, on, split, argmax] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t in = 0; in < split.inner; ++in) {
                const std::size_t j = (*argmax)[o * split.inner + in];
                xn->grad[(o * split.n + j) * split.inner + in] += on->grad[o * split.inner + in];
            }
    });
}

namespace detail {

// Multi-axis reduction bookkeeping: output shape plus a per-axis output
// stride map (0 on reduced axes).
struct MultiAxisPlan {
    Shape out_shape;
    std::vector<std::size_t> in_strides;
    std::vector<std::size_t> out_map;
    std::size_t count = 1;  // elements reduced per output cell
};

inline MultiAxisPlan multi_axis_plan(const char* op, const Shape& in,
                                     const std::vector<std::size_t>& axes, bool keepdims) {
    MultiAxisPlan plan;
    std::vector<char> reduced(in.size(), 0);
    for (std::size_t a : axes) {
        RGM_REQUIRE(a < in.size(), op, ": axis ", a, " out of range for ", shape_str(in));
        RGM_REQUIRE(!reduced[a], op, ": duplicate axis ", a);
        reduced[a] = 1;
        plan.count *= in[a];
    }
    Shape kept = in;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (reduced[i]) kept[i] = 1;
    auto kept_strides = row_major_strides(kept);
    plan.in_strides = row_major_strides(in);
    plan.out_map.assign(in.size(), 0);
    for (std::size_t i = 0; i < in.size(); ++i) plan.out_map[i] = reduced[i] ? 0 : kept_strides[i];
    if (keepdims) {
        plan.out_shape = kept;
    } else {
        for (std::size_t i = 0; i < in.size(); ++i)
            if (!reduced[i]) plan.out_shape.push_back(in[i]);
        if (plan.out_shape.empty()) plan.out_shape = {1};
    }
    return plan;
}

template <typename F>
void for_each_multi_axis(const Shape& in, const MultiAxisPlan& plan, F&& f) {
    const std::size_t total = numel(in);
    for (std::size_t lin = 0; lin < total; ++lin) {
        std::size_t rem = lin, out_off = 0;
        for (std::size_t ax = 0; ax < in.size(); ++ax) {
            const std::size_t idx = rem / plan.in_strides[ax];
            rem %= plan.in_strides[ax];
            out_off += idx * plan.out_map[ax];
        }
        f(lin, out_off);
    }
}

}  // namespace detail

template <std::floating_point Real>
Tensor<Real> reduce_mean(const Tensor<Real>& x, const std::vector<std::size_t>& axes,
                         bool keepdims = false) {
    auto plan = detail::multi_axis_plan("reduce_mean", x.shape(), axes, keepdims);
    Tensor<Real> out = Tensor<Real>::zeros(plan.out_shape);
    detail::for_each_multi_axis(x.shape(), plan, [&](std::size_t lin, std::size_t oo) {
        out.values()[oo] += x.values()[lin];
    });
    const Real inv = Real(1) / Real(plan.count);
    for (auto& v : out.values()) v *= inv;
    auto xn = x.node(), on = out.node();
    Shape in_shape = x.shape();
    return detail::finish_op<Real>("reduce_mean", out, {x}, [xn, on, plan, in_shape, inv] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        detail::for_each_multi_axis(in_shape, plan, [&](std::size_t lin, std::size_t oo) {
            xn->grad[lin] += on->grad[oo] * inv;
        });
    });
}

// Population variance over an axis set.
template <std::floating_point Real>
Tensor<Real> reduce_var(const Tensor<Real>& x, const std::vector<std::size_t>& axes,
                        bool keepdims = false) {
    auto plan = detail::multi_axis_plan("reduce_var", x.shape(), axes, keepdims);
    std::vector<Real> mean(numel(plan.out_shape), Real(0));
    detail::for_each_multi_axis(x.shape(), plan, [&](std::size_t lin, std::size_t oo) {
        mean[oo] += x.values()[lin];
    });
    const Real inv = Real(1) / Real(plan.count);
    for (auto& m : mean) m *= inv;
    Tensor<Real> out = Tensor<Real>::zeros(plan.out_shape);
    detail::for_each_multi_axis(x.shape(), plan, [&](std::size_t lin, std::size_t oo) {
        const Real d = x.values()[lin] - mean[oo];
        out.values()[oo] += d * d;
    });
    for (auto& v : out.values()) v *= inv;
    auto mean_saved = std::make_shared<std::vector<Real>>(std::move(mean));
    auto xn = x.node(), on = out.node();
    Shape in_shape = x.shape();
    return detail::finish_op<Real>(
        "reduce_var", out, {x}, [xn, on, plan, in_shape, inv, mean_saved] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            detail::for_each_multi_axis(in_shape, plan, [&](std::size_t lin, std::size_t oo) {
                xn->grad[lin] += on->grad[oo] * Real(2) * inv *
                                 (xn->values[lin] - (*mean_saved)[oo]);
            });
        });
}

// Rows (leading-axis slices) of x selected by index, duplicates allowed.
template <std::floating_point Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::size_t>& idx) {
    RGM_REQUIRE(x.rank() >= 1, "gather_rows: rank-0 input");
    const std::size_t n = x.dim(0);
    const std::size_t block = x.size() / std::max<std::size_t>(n, 1);
    for (std::size_t i : idx)
        RGM_REQUIRE(i < n, "gather_rows: index ", i, " out of range [0, ", n, ")");
    Shape out_shape = x.shape();
    out_shape[0] = idx.size();
    Tensor<Real> out = Tensor<Real>::zeros(out_shape);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.values().data() + idx[r] * block, block, out.values().data() + r * block);
    auto xn = x.node(), on = out.node();
    auto idx_saved = std::make_shared<std::vector<std::size_t>>(idx);
    return detail::finish_op<Real>("gather_rows", out, {x}, [xn, on, idx_saved, block] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t r = 0; r < idx_saved->size(); ++r) {
            const Real* src = on->grad.data() + r * block;
            Real* dst = xn->grad.data() + (*idx_saved)[r] * block;
            for (std::size_t q = 0; q < block; ++q) dst[q] += src[q];
        }
    });
}

template <std::floating_point Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
    RGM_REQUIRE(numel(new_shape) == x.size(), "reshape: ", shape_str(x.shape()),
                " cannot view as ", shape_str(new_shape));
    Tensor<Real> out(new_shape, x.values());
    auto xn = x.node(), on = out.node();
    return detail::finish_op<Real>("reshape", out, {x}, [xn, on] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
}

// ---------------------------------------------------------------------------
// conveniences built on the primitives

template <std::floating_point Real>
Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <std::floating_point Real>
Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <std::floating_point Real>
Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <std::floating_point Real>
Tensor<Real> operator/(const Tensor<Real>& a, const Tensor<Real>& b) { return divide(a, b); }
template <std::floating_point Real>
Tensor<Real> operator*(const Tensor<Real>& a, Real s) { return affine(a, s, Real(0)); }
template <std::floating_point Real>
Tensor<Real> operator*(Real s, const Tensor<Real>& a) { return affine(a, s, Real(0)); }
template <std::floating_point Real>
Tensor<Real> operator+(const Tensor<Real>& a, Real s) { return affine(a, Real(1), s); }
template <std::floating_point Real>
Tensor<Real> operator-(const Tensor<Real>& a, Real s) { return affine(a, Real(1), -s); }
template <std::floating_point Real>
Tensor<Real> operator-(Real s, const Tensor<Real>& a) { return affine(a, Real(-1), s); }
template <std::floating_point Real>
Tensor<Real> operator-(const Tensor<Real>& a) { return affine(a, Real(-1), Real(0)); }

template <std::floating_point Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    Tensor<Real> flat = reshape(x, {x.size()});
    return reduce_sum(flat, 0);
}

// max(x, c) via relu composition, so the eps guard stays differentiable
template <std::floating_point Real>
Tensor<Real> clamp_min(const Tensor<Real>& x, Real c) {
    return relu(x - c) + c;
}

// min(x, c) = c - relu(c - x)
template <std::floating_point Real>
Tensor<Real> clamp_max(const Tensor<Real>& x, Real c) {
    return affine(relu(affine(x, Real(-1), c)), Real(-1), c);
}

// ---------------------------------------------------------------------------
// finite differences

// Max relative error between analytic gradient of f at x and central
// differences: max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|).
template <std::floating_point Real>
Real grad_check(const std::function<Tensor<Real>(const Tensor<Real>&)>& f, const Tensor<Real>& x0,
                Real step) {
    RGM_REQUIRE(step > Real(0), "grad_check: step must be positive");
    Tensor<Real> x(x0.shape(), x0.values());
    x.set_requires_grad(true);
    Tape<Real> tape;
    {
        TapeScope<Real> scope(tape);
        Tensor<Real> y = f(x);
        RGM_REQUIRE(y.size() == 1, "grad_check: f must be scalar-valued");
        tape.backward(y);
    }
    const std::vector<Real> analytic = x.grad_copy();

    Tensor<Real> probe(x0.shape(), x0.values());
    Real max_err = Real(0);
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const Real orig = probe.values()[i];
        probe.values()[i] = orig + step;
        const Real fp = f(probe).item();
        probe.values()[i] = orig - step;
        const Real fm = f(probe).item();
        probe.values()[i] = orig;
        const Real numeric = (fp - fm) / (Real(2) * step);
        if (!std::isfinite(numeric)) return std::numeric_limits<Real>::infinity();
        const Real denom = std::max(Real(1e-8), std::abs(analytic[i]) + std::abs(numeric));
        max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

}  // namespace rgm::ad
