#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ulact/rng.hpp"

namespace ulact {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major array with shared storage and an optional grad
// buffer of identical shape.
// ---------------------------------------------------------------------------

namespace detail {
inline std::int64_t next_tensor_id() {
    static std::atomic<std::int64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename T>
class Tensor {
public:
    struct Storage {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;  // same size as value when requires_grad
        bool requires_grad = false;
        std::int64_t id = 0;
    };

    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<T> data, bool requires_grad) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            shape_error("tensor", "shape " + shape_str(shape) + " does not match data length " +
                                      std::to_string(data.size()));
        Tensor t;
        t.s_ = std::make_shared<Storage>();
        t.s_->shape = std::move(shape);
        t.s_->value = std::move(data);
        t.s_->requires_grad = requires_grad;
        if (requires_grad) t.s_->grad.assign(t.s_->value.size(), T(0));
        t.s_->id = detail::next_tensor_id();
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)), T(0));
        return leaf(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)), fill);
        return leaf(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return leaf({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->value.size()); }
    std::int64_t id() const { return s_->id; }
    bool requires_grad() const { return s_->requires_grad; }

    std::vector<T>& value() { return s_->value; }
    const std::vector<T>& value() const { return s_->value; }
    std::vector<T>& grad() {
        if (!s_->requires_grad) shape_error("grad", "tensor does not require grad");
        return s_->grad;
    }
    const std::vector<T>& grad() const {
        if (!s_->requires_grad) shape_error("grad", "tensor does not require grad");
        return s_->grad;
    }

    T item() const {
        if (numel() != 1) shape_error("item", "tensor " + shape_str(shape()) + " is not scalar");
        return s_->value[0];
    }

    void zero_grad() {
        if (s_->requires_grad) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    // Detached copy: same values, no grad, fresh identity.
    Tensor detach() const {
        return leaf(s_->shape, s_->value, false);
    }

    std::shared_ptr<Storage> storage() const { return s_; }

private:
    std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of primitive applications. Backward walks records in
// reverse, restricted to the subgraph that reaches the loss, so nodes the
// loss never used keep all-zero grads.
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
public:
    struct Record {
        const char* op;
        std::vector<std::int64_t> inputs;
        std::int64_t output;
        std::shared_ptr<typename Tensor<T>::Storage> out_storage;
        std::function<void()> backward;
    };

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(const char* op, std::vector<std::int64_t> inputs, const Tensor<T>& output,
                std::function<void()> backward) {
        records_.push_back(
            Record{op, std::move(inputs), output.id(), output.storage(), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }

    void clear() { records_.clear(); }

    // Accumulates dLoss into leaf grads. Grads of op outputs are transient and
    // reset per call, so repeated backward calls add one full contribution
    // each, and leaves keep accumulating until explicitly zeroed.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            shape_error("backward", "loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            shape_error("backward", "loss does not require grad");
        for (auto& rec : records_)
            std::fill(rec.out_storage->grad.begin(), rec.out_storage->grad.end(), T(0));
        loss.grad()[0] += T(1);
        std::unordered_set<std::int64_t> needed;
        needed.insert(loss.id());
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (needed.count(it->output) == 0) continue;
            it->backward();
            for (std::int64_t in : it->inputs) needed.insert(in);
        }
    }

    // RAII guard for eval-mode forward passes.
    struct NoGrad {
        explicit NoGrad(Tape& t) : tape(t), prev(t.recording_) { t.recording_ = false; }
        ~NoGrad() { tape.recording_ = prev; }
        Tape& tape;
        bool prev;
    };

private:
    std::vector<Record> records_;
    bool recording_ = true;
};

// ---------------------------------------------------------------------------
// Primitives. Each op computes its value eagerly and, when the tape is
// recording and an input requires grad, registers a closure that scatters
// d(out) into the inputs' grad buffers.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> make_output(Tape<T>& tape, Shape shape, std::vector<T> value, bool any_input_grad) {
    const bool rg = tape.recording() && any_input_grad;
    return Tensor<T>::leaf(std::move(shape), std::move(value), rg);
}

inline std::vector<std::int64_t> strides_of(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * s[i + 1];
    return st;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        shape_error("matmul", "expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        shape_error("matmul", "inner dims mismatch: " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
    std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* pc = out.data();
    for (int i = 0; i < m; ++i) {
        const T* arow = pa + static_cast<std::size_t>(i) * k;
        T* crow = pc + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = pb + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    auto t = detail::make_output(tape, {m, n}, std::move(out), a.requires_grad() || b.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage(), sb = b.storage(), sc = t.storage();
        tape.record("matmul", {a.id(), b.id()}, t, [sa, sb, sc, m, k, n]() {
            const T* gc = sc->grad.data();
            if (sa->requires_grad) {
                T* ga = sa->grad.data();
                const T* pb2 = sb->value.data();
                // dA += dC * B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const T g = gc[static_cast<std::size_t>(i) * n + j];
                        if (g == T(0)) continue;
                        const T* brow = pb2 + 0;
                        for (int p = 0; p < k; ++p)
                            ga[static_cast<std::size_t>(i) * k + p] +=
                                g * brow[static_cast<std::size_t>(p) * n + j];
                    }
            }
            if (sb->requires_grad) {
                T* gb = sb->grad.data();
                const T* pa2 = sa->value.data();
                // dB += A^T * dC
                for (int i = 0; i < m; ++i) {
                    const T* arow = pa2 + static_cast<std::size_t>(i) * k;
                    const T* grow = gc + static_cast<std::size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const T av = arow[p];
                        if (av == T(0)) continue;
                        T* brow = gb + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return t;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        shape_error("add", "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    auto t = detail::make_output(tape, a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage(), sb = b.storage(), sc = t.storage();
        tape.record("add", {a.id(), b.id()}, t, [sa, sb, sc]() {
            if (sa->requires_grad)
                for (std::size_t i = 0; i < sc->grad.size(); ++i) sa->grad[i] += sc->grad[i];
            if (sb->requires_grad)
                for (std::size_t i = 0; i < sc->grad.size(); ++i) sb->grad[i] += sc->grad[i];
        });
    }
    return t;
}

// a: [..., n], bias: [n], broadcast over leading dims.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& bias) {
    if (bias.shape().size() != 1 || a.shape().empty() || a.shape().back() != bias.shape()[0])
        shape_error("add_bias", "bias " + shape_str(bias.shape()) + " does not broadcast over " +
                                    shape_str(a.shape()));
    const int n = bias.shape()[0];
    const std::int64_t rows = a.numel() / n;
    std::vector<T> out(a.value());
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(r) * n + j] += bias.value()[j];
    auto t = detail::make_output(tape, a.shape(), std::move(out), a.requires_grad() || bias.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage(), sb = bias.storage(), sc = t.storage();
        tape.record("add_bias", {a.id(), bias.id()}, t, [sa, sb, sc, rows, n]() {
            if (sa->requires_grad)
                for (std::size_t i = 0; i < sc->grad.size(); ++i) sa->grad[i] += sc->grad[i];
            if (sb->requires_grad)
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j)
                        sb->grad[j] += sc->grad[static_cast<std::size_t>(r) * n + j];
        });
    }
    return t;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        shape_error("mul", "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    auto t = detail::make_output(tape, a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage(), sb = b.storage(), sc = t.storage();
        tape.record("mul", {a.id(), b.id()}, t, [sa, sb, sc]() {
            if (sa->requires_grad)
                for (std::size_t i = 0; i < sc->grad.size(); ++i)
                    sa->grad[i] += sc->grad[i] * sb->value[i];
            if (sb->requires_grad)
                for (std::size_t i = 0; i < sc->grad.size(); ++i)
                    sb->grad[i] += sc->grad[i] * sa->value[i];
        });
    }
    return t;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
    std::vector<T> out(a.value());
    for (auto& v : out) v *= c;
    auto t = detail::make_output(tape, a.shape(), std::move(out), a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        tape.record("scale", {a.id()}, t, [sa, sc, c]() {
            for (std::size_t i = 0; i < sc->grad.size(); ++i) sa->grad[i] += c * sc->grad[i];
        });
    }
    return t;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) shape_error("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    const int rank = static_cast<int>(s0.size());
    if (axis < 0 || axis >= rank) shape_error("concat", "axis " + std::to_string(axis) + " out of range");
    Shape out_shape = s0;
    out_shape[axis] = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        if (static_cast<int>(p.shape().size()) != rank)
            shape_error("concat", "rank mismatch: " + shape_str(s0) + " vs " + shape_str(p.shape()));
        for (int d = 0; d < rank; ++d)
            if (d != axis && p.shape()[d] != s0[d])
                shape_error("concat", "dim " + std::to_string(d) + " mismatch: " + shape_str(s0) +
                                          " vs " + shape_str(p.shape()));
        out_shape[axis] += p.shape()[axis];
        any_grad = any_grad || p.requires_grad();
    }
    // Row-major: treat as [outer, axis_dim, inner] blocks.
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (int d = axis + 1; d < rank; ++d) inner *= s0[d];
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    const std::int64_t out_axis = out_shape[axis];
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t ax = p.shape()[axis];
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(p.value().data() + o * ax * inner, ax * inner,
                        out.data() + (o * out_axis + offset) * inner);
        offset += ax;
    }
    auto t = detail::make_output(tape, out_shape, std::move(out), any_grad);
    if (t.requires_grad()) {
        std::vector<std::int64_t> ids;
        std::vector<std::shared_ptr<typename Tensor<T>::Storage>> storages;
        for (const auto& p : parts) {
            ids.push_back(p.id());
            storages.push_back(p.storage());
        }
        auto sc = t.storage();
        tape.record("concat", ids, t, [storages, sc, outer, inner, out_axis, axis]() {
            std::int64_t off = 0;
            for (const auto& sp : storages) {
                const std::int64_t ax = sp->shape[axis];
                if (sp->requires_grad) {
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = sc->grad.data() + (o * out_axis + off) * inner;
                        T* dst = sp->grad.data() + o * ax * inner;
                        for (std::int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                    }
                }
                off += ax;
            }
        });
    }
    return t;
}

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& a, const std::vector<int>& starts,
                const std::vector<int>& sizes) {
    const Shape& s = a.shape();
    const int rank = static_cast<int>(s.size());
    if (static_cast<int>(starts.size()) != rank || static_cast<int>(sizes.size()) != rank)
        shape_error("slice", "starts/sizes rank mismatch with " + shape_str(s));
    Shape out_shape(sizes.begin(), sizes.end());
    for (int d = 0; d < rank; ++d)
        if (starts[d] < 0 || sizes[d] < 1 || starts[d] + sizes[d] > s[d])
            shape_error("slice", "dim " + std::to_string(d) + ": [" + std::to_string(starts[d]) +
                                     ", " + std::to_string(starts[d] + sizes[d]) + ") out of " +
                                     std::to_string(s[d]));
    auto in_strides = detail::strides_of(s);
    auto out_strides = detail::strides_of(out_shape);
    const std::int64_t n_out = shape_numel(out_shape);
    std::vector<T> out(static_cast<std::size_t>(n_out));
    std::vector<std::int64_t> index_map(static_cast<std::size_t>(n_out));
    for (std::int64_t i = 0; i < n_out; ++i) {
        std::int64_t rem = i, src = 0;
        for (int d = 0; d < rank; ++d) {
            const std::int64_t c = rem / out_strides[d];
            rem %= out_strides[d];
            src += (starts[d] + c) * in_strides[d];
        }
        index_map[static_cast<std::size_t>(i)] = src;
        out[static_cast<std::size_t>(i)] = a.value()[static_cast<std::size_t>(src)];
    }
    auto t = detail::make_output(tape, out_shape, std::move(out), a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        auto map = std::make_shared<std::vector<std::int64_t>>(std::move(index_map));
        tape.record("slice", {a.id()}, t, [sa, sc, map]() {
            for (std::size_t i = 0; i < sc->grad.size(); ++i)
                sa->grad[static_cast<std::size_t>((*map)[i])] += sc->grad[i];
        });
    }
    return t;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        shape_error("reshape", shape_str(a.shape()) + " cannot reshape to " + shape_str(new_shape));
    auto t = detail::make_output(tape, std::move(new_shape), std::vector<T>(a.value()), a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        tape.record("reshape", {a.id()}, t, [sa, sc]() {
            for (std::size_t i = 0; i < sc->grad.size(); ++i) sa->grad[i] += sc->grad[i];
        });
    }
    return t;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
    if (a.shape().size() != 2)
        shape_error("transpose", "expects 2-d operand, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<T> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(j) * m + i] = a.value()[static_cast<std::size_t>(i) * n + j];
    auto t = detail::make_output(tape, {n, m}, std::move(out), a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        tape.record("transpose", {a.id()}, t, [sa, sc, m, n]() {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    sa->grad[static_cast<std::size_t>(i) * n + j] +=
                        sc->grad[static_cast<std::size_t>(j) * m + i];
        });
    }
    return t;
}

// Row-wise softmax over the last axis.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& a) {
    if (a.shape().empty()) shape_error("softmax", "rank-0 input");
    const int n = a.shape().back();
    const std::int64_t rows = a.numel() / n;
    std::vector<T> out(a.value().size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * n;
        T* y = out.data() + r * n;
        T mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int j = 0; j < n; ++j) y[j] /= sum;
    }
    auto t = detail::make_output(tape, a.shape(), std::move(out), a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        tape.record("softmax", {a.id()}, t, [sa, sc, rows, n]() {
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* y = sc->value.data() + r * n;
                const T* gy = sc->grad.data() + r * n;
                T* gx = sa->grad.data() + r * n;
                T dot = T(0);
                for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return t;
}

// Layer norm over the last axis with learned gain/bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
    if (a.shape().empty()) shape_error("layer_norm", "rank-0 input");
    const int n = a.shape().back();
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n})
        shape_error("layer_norm", "gamma/beta must be [" + std::to_string(n) + "], got " +
                                      shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    const std::int64_t rows = a.numel() / n;
    std::vector<T> out(a.value().size());
    std::vector<T> xhat(a.value().size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * n;
        T mean = T(0);
        for (int j = 0; j < n; ++j) mean += x[j];
        mean /= T(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= T(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < n; ++j) {
            const T xh = (x[j] - mean) * is;
            xhat[static_cast<std::size_t>(r * n + j)] = xh;
            out[static_cast<std::size_t>(r * n + j)] = gamma.value()[j] * xh + beta.value()[j];
        }
    }
    const bool any = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    auto t = detail::make_output(tape, a.shape(), std::move(out), any);
    if (t.requires_grad()) {
        auto sa = a.storage(), sg = gamma.storage(), sb = beta.storage(), sc = t.storage();
        auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
        auto is = std::make_shared<std::vector<T>>(std::move(inv_std));
        tape.record("layer_norm", {a.id(), gamma.id(), beta.id()}, t,
                    [sa, sg, sb, sc, xh, is, rows, n]() {
                        for (std::int64_t r = 0; r < rows; ++r) {
                            const T* gy = sc->grad.data() + r * n;
                            const T* xhr = xh->data() + r * n;
                            if (sg->requires_grad)
                                for (int j = 0; j < n; ++j) sg->grad[j] += gy[j] * xhr[j];
                            if (sb->requires_grad)
                                for (int j = 0; j < n; ++j) sb->grad[j] += gy[j];
                            if (sa->requires_grad) {
                                T mean_dy = T(0), mean_dy_xh = T(0);
                                for (int j = 0; j < n; ++j) {
                                    const T dyh = gy[j] * sg->value[j];
                                    mean_dy += dyh;
                                    mean_dy_xh += dyh * xhr[j];
                                }
                                mean_dy /= T(n);
                                mean_dy_xh /= T(n);
                                const T isr = (*is)[static_cast<std::size_t>(r)];
                                T* gx = sa->grad.data() + r * n;
                                for (int j = 0; j < n; ++j) {
                                    const T dyh = gy[j] * sg->value[j];
                                    gx[j] += isr * (dyh - mean_dy - xhr[j] * mean_dy_xh);
                                }
                            }
                        }
                    });
    }
    return t;
}

// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
    std::vector<T> out(a.value().size());
    const T inv_sqrt2 = T(0.7071067811865475244);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a.value()[i];
        out[i] = x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
    }
    auto t = detail::make_output(tape, a.shape(), std::move(out), a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        tape.record("gelu", {a.id()}, t, [sa, sc, inv_sqrt2]() {
            const T inv_sqrt2pi = T(0.3989422804014326779);
            for (std::size_t i = 0; i < sc->grad.size(); ++i) {
                const T x = sa->value[i];
                const T phi = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                sa->grad[i] += sc->grad[i] * (phi + x * pdf);
            }
        });
    }
    return t;
}

// Row gather: out[i, :] = table[indices[i], :]. Differentiable w.r.t. table.
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, const std::vector<int>& indices) {
    if (table.shape().size() != 2)
        shape_error("embedding", "table must be 2-d, got " + shape_str(table.shape()));
    const int v = table.shape()[0], d = table.shape()[1];
    for (int idx : indices)
        if (idx < 0 || idx >= v)
            shape_error("embedding", "index " + std::to_string(idx) + " out of vocab " + std::to_string(v));
    const int n = static_cast<int>(indices.size());
    std::vector<T> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        std::copy_n(table.value().data() + static_cast<std::size_t>(indices[i]) * d, d,
                    out.data() + static_cast<std::size_t>(i) * d);
    auto t = detail::make_output(tape, {n, d}, std::move(out), table.requires_grad());
    if (t.requires_grad()) {
        auto st = table.storage();
        auto sc = t.storage();
        auto idx = std::make_shared<std::vector<int>>(indices);
        tape.record("embedding", {table.id()}, t, [st, sc, idx, d]() {
            for (std::size_t i = 0; i < idx->size(); ++i) {
                const T* g = sc->grad.data() + i * d;
                T* row = st->grad.data() + static_cast<std::size_t>((*idx)[i]) * d;
                for (int j = 0; j < d; ++j) row[j] += g[j];
            }
        });
    }
    return t;
}

namespace detail {
// Permutation for patch extraction: frame [C,S,S] -> [(S/P)^2, C*P*P].
inline std::vector<std::int64_t> patch_permutation(int c, int s, int p) {
    const int g = s / p;
    std::vector<std::int64_t> map(static_cast<std::size_t>(c) * s * s);
    std::int64_t o = 0;
    for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px)
            for (int ch = 0; ch < c; ++ch)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        map[static_cast<std::size_t>(o++)] =
                            static_cast<std::int64_t>(ch) * s * s + (py * p + dy) * s + (px * p + dx);
    return map;
}
}  // namespace detail

// frame [C,S,S] -> patch matrix [(S/P)^2, C*P*P]
template <typename T>
Tensor<T> patchify(Tape<T>& tape, const Tensor<T>& frame, int patch) {
    if (frame.shape().size() != 3)
        shape_error("patchify", "expects [C,S,S], got " + shape_str(frame.shape()));
    const int c = frame.shape()[0], s = frame.shape()[1];
    if (frame.shape()[2] != s || s % patch != 0)
        shape_error("patchify", "frame " + shape_str(frame.shape()) + " not divisible by patch " +
                                    std::to_string(patch));
    auto map = detail::patch_permutation(c, s, patch);
    const int g = s / patch;
    std::vector<T> out(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = frame.value()[static_cast<std::size_t>(map[i])];
    auto t = detail::make_output(tape, {g * g, c * patch * patch}, std::move(out), frame.requires_grad());
    if (t.requires_grad()) {
        auto sf = frame.storage();
        auto sc = t.storage();
        auto m = std::make_shared<std::vector<std::int64_t>>(std::move(map));
        tape.record("patchify", {frame.id()}, t, [sf, sc, m]() {
            for (std::size_t i = 0; i < sc->grad.size(); ++i)
                sf->grad[static_cast<std::size_t>((*m)[i])] += sc->grad[i];
        });
    }
    return t;
}

// inverse of patchify: [(S/P)^2, C*P*P] -> [C,S,S]
template <typename T>
Tensor<T> unpatchify(Tape<T>& tape, const Tensor<T>& patches, int c, int s, int patch) {
    const int g = s / patch;
    if (patches.shape() != Shape{g * g, c * patch * patch})
        shape_error("unpatchify", "expected " + shape_str({g * g, c * patch * patch}) + ", got " +
                                      shape_str(patches.shape()));
    auto map = detail::patch_permutation(c, s, patch);
    std::vector<T> out(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) out[static_cast<std::size_t>(map[i])] = patches.value()[i];
    auto t = detail::make_output(tape, {c, s, s}, std::move(out), patches.requires_grad());
    if (t.requires_grad()) {
        auto sp = patches.storage();
        auto sc = t.storage();
        auto m = std::make_shared<std::vector<std::int64_t>>(std::move(map));
        tape.record("unpatchify", {patches.id()}, t, [sp, sc, m]() {
            for (std::size_t i = 0; i < sp->grad.size(); ++i)
                sp->grad[i] += sc->grad[static_cast<std::size_t>((*m)[i])];
        });
    }
    return t;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.value()) s += v;
    auto t = detail::make_output(tape, {1}, std::vector<T>{s}, a.requires_grad());
    if (t.requires_grad()) {
        auto sa = a.storage();
        auto sc = t.storage();
        tape.record("sum", {a.id()}, t, [sa, sc]() {
            const T g = sc->grad[0];
            for (auto& v : sa->grad) v += g;
        });
    }
    return t;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
    return scale(tape, sum(tape, a), T(1) / T(a.numel()));
}

// Mean squared error over all elements; differentiable w.r.t. both sides.
template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        shape_error("mse_loss", "shape mismatch: " + shape_str(pred.shape()) + " vs " +
                                    shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    T s = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T d = pred.value()[static_cast<std::size_t>(i)] - target.value()[static_cast<std::size_t>(i)];
        s += d * d;
    }
    s /= T(n);
    auto t = detail::make_output(tape, {1}, std::vector<T>{s},
                                 pred.requires_grad() || target.requires_grad());
    if (t.requires_grad()) {
        auto sp = pred.storage(), st = target.storage(), sc = t.storage();
        tape.record("mse_loss", {pred.id(), target.id()}, t, [sp, st, sc, n]() {
            const T g = sc->grad[0] * T(2) / T(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const T d = sp->value[static_cast<std::size_t>(i)] - st->value[static_cast<std::size_t>(i)];
                if (sp->requires_grad) sp->grad[static_cast<std::size_t>(i)] += g * d;
                if (st->requires_grad) st->grad[static_cast<std::size_t>(i)] -= g * d;
            }
        });
    }
    return t;
}

// Sum of absolute errors over all elements (callers divide by batch).
template <typename T>
Tensor<T> l1_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        shape_error("l1_loss", "shape mismatch: " + shape_str(pred.shape()) + " vs " +
                                   shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    T s = T(0);
    for (std::int64_t i = 0; i < n; ++i)
        s += std::abs(pred.value()[static_cast<std::size_t>(i)] -
                      target.value()[static_cast<std::size_t>(i)]);
    auto t = detail::make_output(tape, {1}, std::vector<T>{s},
                                 pred.requires_grad() || target.requires_grad());
    if (t.requires_grad()) {
        auto sp = pred.storage(), st = target.storage(), sc = t.storage();
        tape.record("l1_loss", {pred.id(), target.id()}, t, [sp, st, sc, n]() {
            const T g = sc->grad[0];
            for (std::int64_t i = 0; i < n; ++i) {
                const T d = sp->value[static_cast<std::size_t>(i)] - st->value[static_cast<std::size_t>(i)];
                const T sg = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                if (sp->requires_grad) sp->grad[static_cast<std::size_t>(i)] += g * sg;
                if (st->requires_grad) st->grad[static_cast<std::size_t>(i)] -= g * sg;
            }
        });
    }
    return t;
}

// Cross entropy with logits, summed over rows: -sum_i log softmax(logits_i)[target_i].
template <typename T>
Tensor<T> cross_entropy_logits(Tape<T>& tape, const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2)
        shape_error("cross_entropy", "logits must be 2-d, got " + shape_str(logits.shape()));
    const int n = logits.shape()[0], v = logits.shape()[1];
    if (static_cast<int>(targets.size()) != n)
        shape_error("cross_entropy", "targets length " + std::to_string(targets.size()) +
                                         " vs rows " + std::to_string(n));
    for (int idx : targets)
        if (idx < 0 || idx >= v)
            shape_error("cross_entropy", "target index " + std::to_string(idx) + " out of vocab " +
                                             std::to_string(v));
    T total = T(0);
    std::vector<T> probs(logits.value().size());
    for (int r = 0; r < n; ++r) {
        const T* x = logits.value().data() + static_cast<std::size_t>(r) * v;
        T* p = probs.data() + static_cast<std::size_t>(r) * v;
        T mx = x[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (int j = 0; j < v; ++j) {
            p[j] = std::exp(x[j] - mx);
            sum += p[j];
        }
        for (int j = 0; j < v; ++j) p[j] /= sum;
        total -= (x[targets[static_cast<std::size_t>(r)]] - mx) - std::log(sum);
    }
    auto t = detail::make_output(tape, {1}, std::vector<T>{total}, logits.requires_grad());
    if (t.requires_grad()) {
        auto sl = logits.storage();
        auto sc = t.storage();
        auto pr = std::make_shared<std::vector<T>>(std::move(probs));
        auto tg = std::make_shared<std::vector<int>>(targets);
        tape.record("cross_entropy", {logits.id()}, t, [sl, sc, pr, tg, n, v]() {
            const T g = sc->grad[0];
            for (int r = 0; r < n; ++r) {
                const T* p = pr->data() + static_cast<std::size_t>(r) * v;
                T* gx = sl->grad.data() + static_cast<std::size_t>(r) * v;
                for (int j = 0; j < v; ++j) gx[j] += g * p[j];
                gx[(*tg)[static_cast<std::size_t>(r)]] -= g;
            }
        });
    }
    return t;
}

// Binary cross entropy with logits, summed over elements.
template <typename T>
Tensor<T> bce_logits(Tape<T>& tape, const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape())
        shape_error("bce", "shape mismatch: " + shape_str(logits.shape()) + " vs " +
                               shape_str(targets.shape()));
    const std::int64_t n = logits.numel();
    T total = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T x = logits.value()[static_cast<std::size_t>(i)];
        const T y = targets.value()[static_cast<std::size_t>(i)];
        // max(x,0) - x*y + log(1 + exp(-|x|))
        total += std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    auto t = detail::make_output(tape, {1}, std::vector<T>{total}, logits.requires_grad());
    if (t.requires_grad()) {
        auto sl = logits.storage(), st = targets.storage(), sc = t.storage();
        tape.record("bce", {logits.id()}, t, [sl, st, sc, n]() {
            const T g = sc->grad[0];
            for (std::int64_t i = 0; i < n; ++i) {
                const T x = sl->value[static_cast<std::size_t>(i)];
                const T y = st->value[static_cast<std::size_t>(i)];
                const T sig = T(1) / (T(1) + std::exp(-x));
                sl->grad[static_cast<std::size_t>(i)] += g * (sig - y);
            }
        });
    }
    return t;
}

// Straight-through estimator: forward returns `quantized`, backward routes the
// whole gradient to `continuous`. The quantized side receives nothing here;
// its parameters learn through the codebook loss.
template <typename T>
Tensor<T> ste_passthrough(Tape<T>& tape, const Tensor<T>& quantized, const Tensor<T>& continuous) {
    if (quantized.shape() != continuous.shape())
        shape_error("ste_passthrough", "shape mismatch: " + shape_str(quantized.shape()) + " vs " +
                                           shape_str(continuous.shape()));
    auto t = detail::make_output(tape, quantized.shape(), std::vector<T>(quantized.value()),
                                 continuous.requires_grad());
    if (t.requires_grad()) {
        auto sq = continuous.storage();
        auto sc = t.storage();
        tape.record("ste_passthrough", {continuous.id()}, t, [sq, sc]() {
            for (std::size_t i = 0; i < sc->grad.size(); ++i) sq->grad[i] += sc->grad[i];
        });
    }
    return t;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.
// ---------------------------------------------------------------------------

template <typename T>
struct AdamW {
    struct Hyper {
        T lr = T(1e-3);
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
        T weight_decay = T(0);
    };

    Hyper hp;
    std::int64_t step_count = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    void step(std::vector<Tensor<T>>& params) {
        if (m.empty()) {
            m.resize(params.size());
            v.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m[i].assign(params[i].value().size(), T(0));
                v[i].assign(params[i].value().size(), T(0));
            }
        }
        if (m.size() != params.size())
            shape_error("adamw", "optimizer state tracks " + std::to_string(m.size()) +
                                     " params, got " + std::to_string(params.size()));
        ++step_count;
        const T bc1 = T(1) - std::pow(hp.beta1, T(step_count));
        const T bc2 = T(1) - std::pow(hp.beta2, T(step_count));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].requires_grad())
                shape_error("adamw", "param " + std::to_string(i) + " has no grad");
            auto& val = params[i].value();
            auto& grad = params[i].grad();
            if (m[i].size() != val.size())
                shape_error("adamw", "state size mismatch for param " + std::to_string(i));
            for (std::size_t j = 0; j < val.size(); ++j) {
                const T g = grad[j];
                m[i][j] = hp.beta1 * m[i][j] + (T(1) - hp.beta1) * g;
                v[i][j] = hp.beta2 * v[i][j] + (T(1) - hp.beta2) * g * g;
                const T mhat = m[i][j] / bc1;
                const T vhat = v[i][j] / bc2;
                val[j] -= hp.lr * (mhat / (std::sqrt(vhat) + hp.eps) + hp.weight_decay * val[j]);
            }
        }
    }

    void zero_grad(std::vector<Tensor<T>>& params) {
        for (auto& p : params) p.zero_grad();
    }
};

// ---------------------------------------------------------------------------
// Named parameter registry. Parameters are initialized from RNG streams keyed
// by their own names, so values do not depend on creation order, and the
// store iterates in insertion order for deterministic optimizer sweeps and
// serialization.
// ---------------------------------------------------------------------------

template <typename T>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> normal(const std::string& name, Shape shape, double stddev) {
        RngStream rng(seed_, "init/" + name);
        std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : data) x = static_cast<T>(rng.next_normal() * stddev);
        return insert(name, Tensor<T>::leaf(std::move(shape), std::move(data), true));
    }

    Tensor<T> constant(const std::string& name, Shape shape, T fill) {
        return insert(name, Tensor<T>::full(std::move(shape), fill, true));
    }

    Tensor<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) shape_error("params", "unknown parameter '" + name + "'");
        return params_[it->second].second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return params_; }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        out.reserve(params_.size());
        for (const auto& [name, t] : params_) out.push_back(t);
        return out;
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    std::uint64_t seed() const { return seed_; }

private:
    Tensor<T> insert(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) shape_error("params", "duplicate parameter '" + name + "'");
        index_[name] = params_.size();
        params_.emplace_back(name, t);
        return t;
    }

    std::uint64_t seed_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check. Runs one analytic backward, then compares
// sampled coordinates against central differences of the same forward
// function. `f` must rebuild the forward pass on the tape it is given.
// ---------------------------------------------------------------------------

template <typename T>
struct GradCheckReport {
    T max_rel_err = T(0);
    std::string worst_param;
    std::int64_t worst_coord = -1;
    bool all_finite = true;
};

template <typename T, typename F>
GradCheckReport<T> finite_diff_check(F&& f, const std::vector<std::pair<std::string, Tensor<T>>>& params,
                                     int num_samples, T eps, RngStream& rng) {
    if (!(eps > T(0))) shape_error("finite_diff_check", "eps must be positive");
    for (auto& [name, p] : params) {
        Tensor<T> t = p;
        t.zero_grad();
    }
    Tape<T> tape;
    Tensor<T> loss = f(tape);
    if (loss.requires_grad()) {
        tape.backward(loss);
    } else if (loss.numel() != 1) {
        shape_error("finite_diff_check", "loss must be scalar, got " + shape_str(loss.shape()));
    }
    // A loss with no grad path leaves every analytic grad at zero, which is
    // exactly what the central differences should report too.

    GradCheckReport<T> rep;
    std::int64_t total = 0;
    for (const auto& [name, p] : params) total += p.numel();
    if (total == 0) return rep;

    auto eval = [&]() -> T {
        Tape<T> t2;
        t2.set_recording(false);
        return f(t2).item();
    };

    for (int s = 0; s < num_samples; ++s) {
        std::int64_t flat = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(total)));
        std::size_t pi = 0;
        while (flat >= params[pi].second.numel()) {
            flat -= params[pi].second.numel();
            ++pi;
        }
        Tensor<T> p = params[pi].second;
        const std::size_t ci = static_cast<std::size_t>(flat);
        const T saved = p.value()[ci];
        p.value()[ci] = saved + eps;
        const T fp = eval();
        p.value()[ci] = saved - eps;
        const T fm = eval();
        p.value()[ci] = saved;
        const T numeric = (fp - fm) / (T(2) * eps);
        const T analytic = p.grad()[ci];
        if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
            rep.all_finite = false;
            rep.worst_param = params[pi].first;
            rep.worst_coord = flat;
            rep.max_rel_err = std::numeric_limits<T>::infinity();
            return rep;
        }
        const T rel = std::abs(analytic - numeric) / std::max(T(1), std::abs(analytic));
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = params[pi].first;
            rep.worst_coord = flat;
        }
    }
    return rep;
}

}  // namespace ulact
