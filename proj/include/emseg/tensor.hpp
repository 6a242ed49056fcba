// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor<R> is a cheap handle onto shared storage. Differentiable ops
// record a backward closure on the thread's active Tape; Tape::backward
// runs the closures in reverse topological (= creation) order and
// accumulates gradients into every requires_grad leaf.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>

#include "emseg/common.hpp"
#include "emseg/rng.hpp"

namespace emseg {

template <class R>
struct TensorImpl {
    Shape shape;
    std::vector<R> data;
    std::vector<R> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    int node_id = -1;  // index of the producing record on the tape, -1 for leaves
};

template <class R>
class Tensor {
  public:
    Tensor() : impl_(std::make_shared<TensorImpl<R>>()) {}

    static Tensor zeros(const Shape& shape) { return full(shape, R(0)); }

    static Tensor full(const Shape& shape, R value) {
        Tensor t;
        t.impl_->shape = checked(shape);
        t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), value);
        return t;
    }

    static Tensor from_data(const Shape& shape, std::vector<R> values) {
        Tensor t;
        t.impl_->shape = checked(shape);
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw ShapeError("from_data: " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        t.impl_->data = std::move(values);
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    R* data() { return impl_->data.data(); }
    const R* data() const { return impl_->data.data(); }
    std::vector<R>& vec() { return impl_->data; }
    const std::vector<R>& vec() const { return impl_->data; }

    R item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    // Row-major element access, mainly for tests and small setups.
    R& at(std::initializer_list<int> idx) { return impl_->data[flat(idx)]; }
    R at(std::initializer_list<int> idx) const { return impl_->data[flat(idx)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<R>& grad() {
        ensure_grad();
        return impl_->grad;
    }
    const std::vector<R>& grad_ref() const { return impl_->grad; }
    void ensure_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), R(0));
    }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), R(0));
    }

    int node_id() const { return impl_->node_id; }
    void set_node_id(int id) { impl_->node_id = id; }

    // Deep copy detached from any graph.
    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    bool all_finite() const {
        for (R v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

  private:
    static Shape checked(const Shape& s) {
        for (int e : s)
            if (e < 1) throw InvalidShape("shape " + shape_str(s) + " has a non-positive extent");
        return s;
    }

    size_t flat(std::initializer_list<int> idx) const {
        size_t off = 0, d = 0;
        for (int i : idx) off = off * static_cast<size_t>(impl_->shape[d++]) + static_cast<size_t>(i);
        return off;
    }

    std::shared_ptr<TensorImpl<R>> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Tape

inline int& nograd_depth() {
    thread_local int depth = 0;
    return depth;
}

// RAII switch that disables recording for oracle evaluations.
struct NoGradGuard {
    NoGradGuard() { ++nograd_depth(); }
    ~NoGradGuard() { --nograd_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class R>
class Tape {
  public:
    Tape() {
        if (active_slot() != nullptr) throw Error("only one active Tape per thread");
        active_slot() = this;
    }
    ~Tape() { active_slot() = nullptr; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // The tape ops should record on, or nullptr when grad is disabled.
    static Tape* recording() { return nograd_depth() > 0 ? nullptr : active_slot(); }

    int record(std::vector<int> parents, std::function<void()> backward_fn) {
        records_.push_back({std::move(parents), std::move(backward_fn)});
        return static_cast<int>(records_.size()) - 1;
    }

    size_t size() const { return records_.size(); }

    void backward(Tensor<R> loss) {
        if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar");
        if (!loss.requires_grad()) throw Error("backward: loss is not attached to the tape");
        loss.ensure_grad();
        loss.grad()[0] += R(1);
        for (size_t i = records_.size(); i > 0; --i) records_[i - 1].fn();
        records_.clear();
    }

  private:
    struct Record {
        std::vector<int> parents;
        std::function<void()> fn;
    };

    static Tape*& active_slot() {
        thread_local Tape* t = nullptr;
        return t;
    }

    std::vector<Record> records_;
};

namespace detail {

// Accumulate `g` into t's gradient if t wants one.
template <class R>
inline void accum(Tensor<R>& t, const std::vector<R>& g) {
    if (!t.requires_grad()) return;
    auto& dst = t.grad();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

template <class R, class Fn>
inline Tensor<R> maybe_record(Tensor<R> out, std::vector<const Tensor<R>*> ins, Fn&& backward_fn) {
    Tape<R>* tape = Tape<R>::recording();
    bool needs = false;
    for (auto* in : ins) needs = needs || in->requires_grad();
    if (tape && needs) {
        out.set_requires_grad(true);
        std::vector<int> parents;
        for (auto* in : ins) parents.push_back(in->node_id());
        out.set_node_id(tape->record(std::move(parents), std::forward<Fn>(backward_fn)));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Creation

template <class R>
struct Fill {
    enum class Kind { constant, uniform, kaiming };
    Kind kind = Kind::constant;
    double a = 0.0;  // constant value / uniform lo
    double b = 0.0;  // uniform hi
    int fan_in = 0;

    static Fill constant(double v) { return {Kind::constant, v, 0.0, 0}; }
    static Fill uniform(double lo, double hi) { return {Kind::uniform, lo, hi, 0}; }
    static Fill kaiming(int fan_in) { return {Kind::kaiming, 0.0, 0.0, fan_in}; }
};

// Deterministic per seed. Kaiming draws from normal(0, sqrt(2/fan_in)).
template <class R>
Tensor<R> tensor_create(const Shape& shape, const Fill<R>& fill, uint64_t seed = 0) {
    Tensor<R> t = Tensor<R>::full(shape, R(0));
    switch (fill.kind) {
        case Fill<R>::Kind::constant:
            std::fill(t.vec().begin(), t.vec().end(), static_cast<R>(fill.a));
            break;
        case Fill<R>::Kind::uniform: {
            Rng rng(seed);
            for (auto& v : t.vec()) v = static_cast<R>(rng.uniform(fill.a, fill.b));
            break;
        }
        case Fill<R>::Kind::kaiming: {
            if (fill.fan_in < 1) throw InvalidShape("kaiming fill needs fan_in >= 1");
            Rng rng(seed);
            double stddev = std::sqrt(2.0 / static_cast<double>(fill.fan_in));
            for (auto& v : t.vec()) v = static_cast<R>(rng.normal(0.0, stddev));
            break;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Raw matmul kernels (row-major, contiguous).

// C[M,N] (+)= A[M,K] * B[K,N]
template <class R>
void mm_nn(const R* a, const R* b, R* c, int M, int K, int N, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + static_cast<size_t>(M) * N, R(0));
    for (int i = 0; i < M; ++i) {
        const R* arow = a + static_cast<size_t>(i) * K;
        R* crow = c + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            R aik = arow[k];
            if (aik == R(0)) continue;
            const R* brow = b + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T  (dot products of rows)
template <class R>
void mm_nt(const R* a, const R* b, R* c, int M, int K, int N, bool accumulate = false) {
    for (int i = 0; i < M; ++i) {
        const R* arow = a + static_cast<size_t>(i) * K;
        R* crow = c + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const R* brow = b + static_cast<size_t>(j) * K;
            R acc = 0;
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class R>
void mm_tn(const R* a, const R* b, R* c, int M, int K, int N, bool accumulate = false) {
    if (!accumulate) std::fill(c, c + static_cast<size_t>(M) * N, R(0));
    for (int k = 0; k < K; ++k) {
        const R* arow = a + static_cast<size_t>(k) * M;
        const R* brow = b + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            R aki = arow[i];
            if (aki == R(0)) continue;
            R* crow = c + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) crow[j] += aki * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Core differentiable ops

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    require_shape(a.shape() == b.shape(),
                  "add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<R> out = Tensor<R>::zeros(a.shape());
    const R* pa = a.data();
    const R* pb = b.data();
    R* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    Tensor<R> ac = a, bc = b;
    return detail::maybe_record<R>(out, {&a, &b}, [ac, bc, out]() mutable {
        if (!out.has_grad()) return;
        const auto& g = out.grad_ref();
        detail::accum(ac, g);
        detail::accum(bc, g);
    });
}

template <class R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    require_shape(a.shape() == b.shape(),
                  "mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<R> out = Tensor<R>::zeros(a.shape());
    const R* pa = a.data();
    const R* pb = b.data();
    R* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    Tensor<R> ac = a, bc = b;
    return detail::maybe_record<R>(out, {&a, &b}, [ac, bc, out]() mutable {
        if (!out.has_grad()) return;
        const auto& g = out.grad_ref();
        if (ac.requires_grad()) {
            auto& da = ac.grad();
            const R* pb2 = bc.data();
            for (size_t i = 0; i < da.size(); ++i) da[i] += g[i] * pb2[i];
        }
        if (bc.requires_grad()) {
            auto& db = bc.grad();
            const R* pa2 = ac.data();
            for (size_t i = 0; i < db.size(); ++i) db[i] += g[i] * pa2[i];
        }
    });
}

template <class R>
Tensor<R> scale(const Tensor<R>& a, R factor) {
    Tensor<R> out = Tensor<R>::zeros(a.shape());
    const R* pa = a.data();
    R* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * factor;
    Tensor<R> ac = a;
    return detail::maybe_record<R>(out, {&a}, [ac, out, factor]() mutable {
        if (!out.has_grad() || !ac.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& da = ac.grad();
        for (size_t i = 0; i < da.size(); ++i) da[i] += g[i] * factor;
    });
}

template <class R>
Tensor<R> sum(const Tensor<R>& a) {
    Tensor<R> out = Tensor<R>::zeros({1});
    R acc = 0;
    const R* pa = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = acc;
    Tensor<R> ac = a;
    return detail::maybe_record<R>(out, {&a}, [ac, out]() mutable {
        if (!out.has_grad() || !ac.requires_grad()) return;
        R g = out.grad_ref()[0];
        auto& da = ac.grad();
        for (auto& v : da) v += g;
    });
}

// Copying reshape; gradient flows back through the identity map.
template <class R>
Tensor<R> reshape(const Tensor<R>& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    Tensor<R> out = Tensor<R>::from_data(shape, a.vec());
    Tensor<R> ac = a;
    return detail::maybe_record<R>(out, {&a}, [ac, out]() mutable {
        if (!out.has_grad() || !ac.requires_grad()) return;
        detail::accum(ac, out.grad_ref());
    });
}

template <class R>
Tensor<R> transpose(const Tensor<R>& a) {
    require_shape(a.ndim() == 2, "transpose: expected a matrix, got " + shape_str(a.shape()));
    int M = a.dim(0), N = a.dim(1);
    Tensor<R> out = Tensor<R>::zeros({N, M});
    const R* pa = a.data();
    R* po = out.data();
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) po[static_cast<size_t>(j) * M + i] = pa[static_cast<size_t>(i) * N + j];
    Tensor<R> ac = a;
    return detail::maybe_record<R>(out, {&a}, [ac, out, M, N]() mutable {
        if (!out.has_grad() || !ac.requires_grad()) return;
        const auto& g = out.grad_ref();
        auto& da = ac.grad();
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < M; ++i)
                da[static_cast<size_t>(i) * N + j] += g[static_cast<size_t>(j) * M + i];
    });
}

template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    require_shape(a.ndim() == 2 && b.ndim() == 2,
                  "matmul: expected matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    require_shape(a.dim(1) == b.dim(0),
                  "matmul: inner dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<R> out = Tensor<R>::zeros({M, N});
    mm_nn(a.data(), b.data(), out.data(), M, K, N);
    Tensor<R> ac = a, bc = b;
    return detail::maybe_record<R>(out, {&a, &b}, [ac, bc, out, M, K, N]() mutable {
        if (!out.has_grad()) return;
        const R* g = out.grad_ref().data();
        if (ac.requires_grad()) mm_nt(g, bc.data(), ac.grad().data(), M, N, K, /*accumulate=*/true);
        if (bc.requires_grad()) mm_tn(ac.data(), g, bc.grad().data(), K, M, N, /*accumulate=*/true);
    });
}

}  // namespace emseg
