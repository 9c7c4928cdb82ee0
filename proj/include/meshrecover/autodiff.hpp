// Reverse-mode automatic differentiation over dense tensors. A Tape owns the
// nodes of one forward computation; nodes are created in topological order,
// so the backward pass is a single reverse sweep. Each op installs a closure
// that scatters its output gradient into its parents.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace meshrecover {

namespace gemm_detail {

// All three kernels reduce to the broadcast-saxpy shape (contiguous inner
// loop over the output row), which vectorizes well at these sizes; the
// transposed-B case goes through a thread-local scratch transpose instead of
// a dot-product loop, which does not.

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void nn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
            std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C(m,n) = A(m,k) * B(k,n), overwriting C.
template <class T>
void nn_store(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
              std::size_t k, std::size_t n) {
    if (k == 0) {
        for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
        return;
    }
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        const T a0 = ai[0];
        for (std::size_t j = 0; j < n; ++j) ci[j] = a0 * b[j];
        for (std::size_t p = 1; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class T>
std::vector<T>& scratch_buffer() {
    thread_local std::vector<T> buf;
    return buf;
}

template <class T>
void transpose_scratch(const T* b, std::size_t rows, std::size_t cols, std::vector<T>& bt) {
    if (bt.size() < rows * cols) bt.resize(rows * cols);
    for (std::size_t j = 0; j < rows; ++j)
        for (std::size_t p = 0; p < cols; ++p) bt[p * rows + j] = b[j * cols + p];
}

// C(m,n) += A(m,k) * B(n,k)^T
template <class T>
void nt_acc(const T* __restrict a, const T* b, T* __restrict c, std::size_t m, std::size_t k,
            std::size_t n) {
    std::vector<T>& bt = scratch_buffer<T>();
    transpose_scratch(b, n, k, bt);
    nn_acc(a, bt.data(), c, m, k, n);
}

template <class T>
void nt_store(const T* __restrict a, const T* b, T* __restrict c, std::size_t m, std::size_t k,
              std::size_t n) {
    std::vector<T>& bt = scratch_buffer<T>();
    transpose_scratch(b, n, k, bt);
    nn_store(a, bt.data(), c, m, k, n);
}

// C(m,n) += A(k,m)^T * B(k,n)
template <class T>
void tn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
            std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* ap = a + p * m;
        const T* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = ap[i];
            T* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class T>
void tn_store(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
              std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
    tn_acc(a, b, c, m, k, n);
}

}  // namespace gemm_detail

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Tensor<T>& value() const { return tape->value(id); }
    const Tensor<T>& grad() const { return tape->grad(id); }
};

template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int)>;

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr); }
    Var<T> leaf(Tensor<T> v) { return push(std::move(v), true, nullptr); }

    Var<T> op(Tensor<T> v, bool needs_grad, BackwardFn bw) {
        return push(std::move(v), needs_grad, needs_grad ? std::move(bw) : nullptr);
    }

    Tensor<T>& value(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Gradient buffer, allocated (zeroed) on first touch.
    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }
    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

    // Reverse sweep from a scalar node. Nodes created after `loss` are
    // ignored; nodes that received no gradient are skipped.
    void backward(const Var<T>& loss) {
        Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
        if (ln.value.size() != 1)
            throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                        shape_str(ln.value.shape()));
        grad(loss.id)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs_grad && n.backward && n.grad.size() != 0) n.backward(*this, i);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    // Optional diagnostics: label key nodes so non-finite values can be
    // reported by name.
    void set_label(int id, std::string label) {
        nodes_[static_cast<std::size_t>(id)].label = std::move(label);
    }
    std::optional<std::string> first_nonfinite() const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            for (std::size_t k = 0; k < n.value.size(); ++k)
                if (!std::isfinite(static_cast<double>(n.value[k])))
                    return n.label.empty() ? "node #" + std::to_string(i) : n.label;
        }
        return std::nullopt;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        std::string label;
        bool needs_grad = false;
    };

    Var<T> push(Tensor<T> v, bool needs_grad, BackwardFn bw) {
        nodes_.push_back(Node{std::move(v), Tensor<T>{}, std::move(bw), std::string{}, needs_grad});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops.

namespace ad_detail {

template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape != b.tape) throw std::invalid_argument("op: operands belong to different tapes");
    return *a.tape;
}

inline std::size_t op_rows(const std::vector<std::size_t>& s, bool t) { return t ? s[1] : s[0]; }
inline std::size_t op_cols(const std::vector<std::size_t>& s, bool t) { return t ? s[0] : s[1]; }

}  // namespace ad_detail

// General matrix product with optional transposes: out = op(a) * op(b).
template <class T>
Var<T> mm(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    Tape<T>& tape = ad_detail::same_tape(a, b);
    const Tensor<T>& av = tape.value(a.id);
    const Tensor<T>& bv = tape.value(b.id);
    if (av.rank() != 2 || bv.rank() != 2)
        throw std::invalid_argument("mm: operands must be rank-2");
    const std::size_t m = ad_detail::op_rows(av.shape(), ta);
    const std::size_t k = ad_detail::op_cols(av.shape(), ta);
    const std::size_t kb = ad_detail::op_rows(bv.shape(), tb);
    const std::size_t n = ad_detail::op_cols(bv.shape(), tb);
    if (k != kb)
        throw std::invalid_argument("mm: inner dimensions differ, " + shape_str(av.shape()) +
                                    (ta ? "^T" : "") + " * " + shape_str(bv.shape()) +
                                    (tb ? "^T" : ""));
    Tensor<T> out = Tensor<T>::uninit({m, n});
    if (!ta && !tb) gemm_detail::nn_store(av.data(), bv.data(), out.data(), m, k, n);
    else if (!ta && tb) gemm_detail::nt_store(av.data(), bv.data(), out.data(), m, k, n);
    else if (ta && !tb) gemm_detail::tn_store(av.data(), bv.data(), out.data(), m, k, n);
    else throw std::invalid_argument("mm: double-transposed product is not supported");

    const bool needs = tape.needs_grad(a.id) || tape.needs_grad(b.id);
    const int aid = a.id, bid = b.id;
    return tape.op(std::move(out), needs, [aid, bid, ta, tb, m, k, n](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& A = t.value(aid);
        const Tensor<T>& B = t.value(bid);
        if (t.needs_grad(aid)) {
            Tensor<T>& ga = t.grad(aid);
            if (!ta && !tb) gemm_detail::nt_acc(g.data(), B.data(), ga.data(), m, n, k);
            else if (!ta && tb) gemm_detail::nn_acc(g.data(), B.data(), ga.data(), m, n, k);
            else gemm_detail::nt_acc(B.data(), g.data(), ga.data(), k, n, m);  // ta && !tb
        }
        if (t.needs_grad(bid)) {
            Tensor<T>& gb = t.grad(bid);
            if (!ta && !tb) gemm_detail::tn_acc(A.data(), g.data(), gb.data(), k, m, n);
            else if (!ta && tb) gemm_detail::tn_acc(g.data(), A.data(), gb.data(), n, m, k);
            else gemm_detail::nn_acc(A.data(), g.data(), gb.data(), k, m, n);  // ta && !tb
        }
    });
}

// out = wa * a + wb * b (same shape).
template <class T>
Var<T> lincomb(Var<T> a, Var<T> b, T wa = T(1), T wb = T(1)) {
    Tape<T>& tape = ad_detail::same_tape(a, b);
    const Tensor<T>& av = tape.value(a.id);
    const Tensor<T>& bv = tape.value(b.id);
    if (!av.same_shape(bv))
        throw std::invalid_argument("lincomb: shape mismatch " + shape_str(av.shape()) + " vs " +
                                    shape_str(bv.shape()));
    Tensor<T> out = Tensor<T>::uninit(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * av[i] + wb * bv[i];
    const bool needs = tape.needs_grad(a.id) || tape.needs_grad(b.id);
    const int aid = a.id, bid = b.id;
    return tape.op(std::move(out), needs, [aid, bid, wa, wb](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(aid)) {
            Tensor<T>& ga = t.grad(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += wa * g[i];
        }
        if (t.needs_grad(bid)) {
            Tensor<T>& gb = t.grad(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += wb * g[i];
        }
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    return lincomb(a, b, T(1), T(1));
}

// out(i,j) = m(i,j) + v(j)
template <class T>
Var<T> add_rowvec(Var<T> m, Var<T> v) {
    Tape<T>& tape = ad_detail::same_tape(m, v);
    const Tensor<T>& mv = tape.value(m.id);
    const Tensor<T>& vv = tape.value(v.id);
    if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(1))
        throw std::invalid_argument("add_rowvec: shapes " + shape_str(mv.shape()) + " and " +
                                    shape_str(vv.shape()) + " are incompatible");
    Tensor<T> out = Tensor<T>::uninit(mv.shape());
    const std::size_t r = mv.dim(0), c = mv.dim(1);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = mv.at(i, j) + vv[j];
    const bool needs = tape.needs_grad(m.id) || tape.needs_grad(v.id);
    const int mid = m.id, vid = v.id;
    return tape.op(std::move(out), needs, [mid, vid, r, c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(mid)) {
            Tensor<T>& gm = t.grad(mid);
            for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
        }
        if (t.needs_grad(vid)) {
            Tensor<T>& gv = t.grad(vid);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = tape.value(a.id);
    Tensor<T> out = Tensor<T>::uninit(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * av[i];
    const int aid = a.id;
    return tape.op(std::move(out), tape.needs_grad(a.id), [aid, s](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

// Row-wise layer normalization with affine parameters.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    const Tensor<T>& gv = tape.value(gamma.id);
    const Tensor<T>& bv = tape.value(beta.id);
    if (xv.rank() != 2 || gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != xv.dim(1) ||
        bv.dim(0) != xv.dim(1))
        throw std::invalid_argument("layer_norm: incompatible shapes");
    const std::size_t r = xv.dim(0), c = xv.dim(1);
    Tensor<T> xhat = Tensor<T>::uninit(xv.shape());
    Tensor<T> rstd = Tensor<T>::uninit({r});
    Tensor<T> out = Tensor<T>::uninit(xv.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const T* xi = xv.data() + i * c;
        T mean = T(0);
        for (std::size_t j = 0; j < c; ++j) mean += xi[j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T d = xi[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[i] = rs;
        for (std::size_t j = 0; j < c; ++j) {
            const T h = (xi[j] - mean) * rs;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gv[j] + bv[j];
        }
    }
    const bool needs = tape.needs_grad(x.id) || tape.needs_grad(gamma.id) || tape.needs_grad(beta.id);
    const int xid = x.id, gid = gamma.id, bid = beta.id;
    return tape.op(std::move(out), needs,
                   [xid, gid, bid, r, c, xhat, rstd](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& gv = t.value(gid);
        if (t.needs_grad(bid)) {
            Tensor<T>& gb = t.grad(bid);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        if (t.needs_grad(gid)) {
            Tensor<T>& gg = t.grad(gid);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
        }
        if (t.needs_grad(xid)) {
            Tensor<T>& gx = t.grad(xid);
            for (std::size_t i = 0; i < r; ++i) {
                T sum_gy = T(0), sum_gyx = T(0);
                for (std::size_t j = 0; j < c; ++j) {
                    const T gy = g[i * c + j] * gv[j];
                    sum_gy += gy;
                    sum_gyx += gy * xhat[i * c + j];
                }
                const T inv_c = T(1) / static_cast<T>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const T gy = g[i * c + j] * gv[j];
                    gx[i * c + j] += rstd[i] * (gy - inv_c * sum_gy - xhat[i * c + j] * inv_c * sum_gyx);
                }
            }
        }
    });
}

namespace fastmath {

// Polynomial exp for single-precision hot loops (softmax scores, gelu): a
// degree-5 fit of 2^f over [-1/2, 1/2] with exact power-of-two scaling,
// relative error ~1e-5 -- far below f32 training noise. Pure arithmetic, so
// it is bit-stable across libm implementations. Double-precision code (the
// f64 gradient-check builds in particular) keeps the libm functions.
inline float exp_fast(float x) {
    if (x < -87.0f) return 0.0f;
    const float t = x * 1.44269504088896341f;
    const float fi = std::floor(t + 0.5f);
    const float f = t - fi;
    float p = 1.33978700703195996e-3f;
    p = p * f + 9.67838921158013886e-3f;
    p = p * f + 5.55072562180827540e-2f;
    p = p * f + 2.40226509999801430e-1f;
    p = p * f + 6.93147180559526344e-1f;
    p = p * f + 1.0f;
    union {
        std::uint32_t u;
        float v;
    } scale;
    scale.u = static_cast<std::uint32_t>(static_cast<int>(fi) + 127) << 23;
    return p * scale.v;
}

inline float exp_tr(float x) { return exp_fast(x); }
inline double exp_tr(double x) { return std::exp(x); }

// Branchless in-place exp over a row; every step maps to baseline SSE2, so
// the compiler vectorizes the whole loop (the scalar form above does not).
inline void exp_row(float* __restrict x, std::size_t n) {
    constexpr float kRound = 12582912.0f;  // 1.5 * 2^23: forces round-to-nearest
    for (std::size_t j = 0; j < n; ++j) {
        const float xx = x[j] < -87.0f ? -87.0f : x[j];
        const float t = xx * 1.44269504088896341f;
        const float fi = (t + kRound) - kRound;
        const float f = t - fi;
        float p = 1.33978700703195996e-3f;
        p = p * f + 9.67838921158013886e-3f;
        p = p * f + 5.55072562180827540e-2f;
        p = p * f + 2.40226509999801430e-1f;
        p = p * f + 6.93147180559526344e-1f;
        p = p * f + 1.0f;
        const std::uint32_t bits =
            static_cast<std::uint32_t>(static_cast<std::int32_t>(fi) + 127) << 23;
        float sc;
        std::memcpy(&sc, &bits, 4);
        x[j] = p * sc;
    }
}
inline void exp_row(double* x, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) x[j] = std::exp(x[j]);
}

inline float tanh_tr(float x) {
    if (x > 9.0f) return 1.0f;
    if (x < -9.0f) return -1.0f;
    const float e = exp_fast(2.0f * x);
    return (e - 1.0f) / (e + 1.0f);
}
inline double tanh_tr(double x) { return std::tanh(x); }

// Dot product with four independent partial sums; the fixed re-association
// breaks the FP dependence chain without losing determinism.
template <class T>
T dot_n(const T* __restrict a, const T* __restrict b, std::size_t n) {
    T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    for (; j < n; ++j) s0 += a[j] * b[j];
    return ((s0 + s1) + (s2 + s3));
}

}  // namespace fastmath

// Fused single-head attention over head-dim-major operands: computes
// softmax(scale * QT^T KT) VT^T, materializing only the softmax matrix. The
// score row, its gradient and the softmax VJP all live in stack buffers,
// which keeps the N x N traffic to one stored tensor instead of four.
template <class T>
Var<T> attention_t(Var<T> qt, Var<T> kt, Var<T> vt, T scale) {
    Tape<T>& tape = ad_detail::same_tape(qt, kt);
    ad_detail::same_tape(kt, vt);
    const Tensor<T>& q = tape.value(qt.id);
    const Tensor<T>& k = tape.value(kt.id);
    const Tensor<T>& v = tape.value(vt.id);
    if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v))
        throw std::invalid_argument("attention_t: operands must share shape (dh, n)");
    const std::size_t dh = q.dim(0), n = q.dim(1);

    Tensor<T> probs = Tensor<T>::uninit({n, n});
    Tensor<T> out = Tensor<T>::uninit({dh, n});
    std::vector<T>& row = gemm_detail::scratch_buffer<T>();
    if (row.size() < n) row.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        // Scaled scores for query i.
        {
            const T a0 = scale * q[i];  // QT(0, i)
            const T* k0 = k.data();
            for (std::size_t j = 0; j < n; ++j) row[j] = a0 * k0[j];
        }
        for (std::size_t d = 1; d < dh; ++d) {
            const T ad = scale * q[d * n + i];
            const T* kd = k.data() + d * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += ad * kd[j];
        }
        // Softmax in place.
        T mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        for (std::size_t j = 0; j < n; ++j) row[j] -= mx;
        fastmath::exp_row(row.data(), n);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) sum += row[j];
        const T inv = T(1) / sum;
        T* pi = probs.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) pi[j] = row[j] * inv;
        // Context column i.
        for (std::size_t d = 0; d < dh; ++d)
            out[d * n + i] = fastmath::dot_n(pi, v.data() + d * n, n);
    }

    const bool needs =
        tape.needs_grad(qt.id) || tape.needs_grad(kt.id) || tape.needs_grad(vt.id);
    const int qid = qt.id, kid = kt.id, vid = vt.id;
    return tape.op(std::move(out), needs,
                   [qid, kid, vid, scale, dh, n, probs](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);      // dCtxT (dh, n)
        const Tensor<T>& q = t.value(qid);
        const Tensor<T>& k = t.value(kid);
        const Tensor<T>& v = t.value(vid);
        if (t.needs_grad(vid))
            gemm_detail::nn_acc(g.data(), probs.data(), t.grad(vid).data(), dh, n, n);
        const bool need_qk = t.needs_grad(qid) || t.needs_grad(kid);
        if (!need_qk) return;
        Tensor<T>& gq = t.grad(qid);
        Tensor<T>& gk = t.grad(kid);
        std::vector<T>& dp = gemm_detail::scratch_buffer<T>();
        if (dp.size() < n) dp.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T* pi = probs.data() + i * n;
            // dP row i.
            {
                const T g0 = g[i];  // dCtxT(0, i)
                const T* v0 = v.data();
                for (std::size_t j = 0; j < n; ++j) dp[j] = g0 * v0[j];
            }
            for (std::size_t d = 1; d < dh; ++d) {
                const T gd = g[d * n + i];
                const T* vd = v.data() + d * n;
                for (std::size_t j = 0; j < n; ++j) dp[j] += gd * vd[j];
            }
            // Softmax VJP into scaled-score gradient, folded with the scale.
            const T dot = fastmath::dot_n(dp.data(), pi, n);
            for (std::size_t j = 0; j < n; ++j) dp[j] = scale * pi[j] * (dp[j] - dot);
            // dQT column i and dKT accumulation.
            if (t.needs_grad(qid))
                for (std::size_t d = 0; d < dh; ++d)
                    gq[d * n + i] += fastmath::dot_n(dp.data(), k.data() + d * n, n);
            if (t.needs_grad(kid)) {
                for (std::size_t d = 0; d < dh; ++d) {
                    const T qd = q[d * n + i];
                    T* gkd = gk.data() + d * n;
                    for (std::size_t j = 0; j < n; ++j) gkd[j] += qd * dp[j];
                }
            }
        }
    });
}

template <class T>
Var<T> softmax_rows(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (xv.rank() != 2) throw std::invalid_argument("softmax_rows: operand must be rank-2");
    const std::size_t r = xv.dim(0), c = xv.dim(1);
    Tensor<T> out = Tensor<T>::uninit(xv.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const T* xi = xv.data() + i * c;
        T* oi = out.data() + i * c;
        T mx = xi[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T e = std::exp(xi[j] - mx);
            oi[j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < c; ++j) oi[j] *= inv;
    }
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, r, c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& y = t.value(self);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < r; ++i) {
            T s = T(0);
            for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
        }
    });
}

// Smooth GELU (tanh form).
template <class T>
Var<T> gelu(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    const T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T k1 = T(0.044715);
    Tensor<T> out = Tensor<T>::uninit(xv.shape());
    Tensor<T> tanh_u = Tensor<T>::uninit(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T xi = xv[i];
        const T u = k0 * (xi + k1 * xi * xi * xi);
        const T tu = fastmath::tanh_tr(u);
        tanh_u[i] = tu;
        out[i] = T(0.5) * xi * (T(1) + tu);
    }
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id),
                   [xid, k0, k1, tanh_u](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        const Tensor<T>& xv = t.value(xid);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T xi = xv[i];
            const T tu = tanh_u[i];
            const T du = k0 * (T(1) + T(3) * k1 * xi * xi);
            const T d = T(0.5) * (T(1) + tu) + T(0.5) * xi * (T(1) - tu * tu) * du;
            gx[i] += g[i] * d;
        }
    });
}

// Transposed column slice: out(w, r) = x(:, j0:j0+w)^T. Attention keeps
// per-head operands in head-dim-major layout so the row dimension (sequence
// length) stays the contiguous SIMD axis in every product.
template <class T>
Var<T> slice_cols_t(Var<T> x, std::size_t j0, std::size_t w) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (xv.rank() != 2 || j0 + w > xv.dim(1))
        throw std::invalid_argument("slice_cols_t: out of range");
    const std::size_t r = xv.dim(0), c = xv.dim(1);
    Tensor<T> out = Tensor<T>::uninit({w, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(j, i) = xv[i * c + j0 + j];
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, j0, w, r, c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * c + j0 + j] += g[j * r + i];
    });
}

// Inverse of slice_cols_t over several parts: each part is (w_p, r); the
// output is (r, sum w_p) with part p transposed into its column band.
template <class T>
Var<T> concat_cols_from_t(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols_from_t: no operands");
    Tape<T>& tape = *parts[0].tape;
    const std::size_t r = tape.value(parts[0].id).dim(1);
    std::size_t total = 0;
    bool needs = false;
    for (const auto& p : parts) {
        const Tensor<T>& pv = tape.value(p.id);
        if (pv.rank() != 2 || pv.dim(1) != r)
            throw std::invalid_argument("concat_cols_from_t: row counts differ");
        total += pv.dim(0);
        needs = needs || tape.needs_grad(p.id);
    }
    Tensor<T> out = Tensor<T>::uninit({r, total});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths, offsets;
    for (const auto& p : parts) {
        const Tensor<T>& pv = tape.value(p.id);
        const std::size_t w = pv.dim(0);
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t i = 0; i < r; ++i) out[i * total + off + j] = pv[j * r + i];
        ids.push_back(p.id);
        widths.push_back(w);
        offsets.push_back(off);
        off += w;
    }
    return tape.op(std::move(out), needs, [ids, widths, offsets, r, total](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (!t.needs_grad(ids[p])) continue;
            Tensor<T>& gp = t.grad(ids[p]);
            for (std::size_t j = 0; j < widths[p]; ++j)
                for (std::size_t i = 0; i < r; ++i)
                    gp[j * r + i] += g[i * total + offsets[p] + j];
        }
    });
}

template <class T>
Var<T> slice_cols(Var<T> x, std::size_t j0, std::size_t w) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (xv.rank() != 2 || j0 + w > xv.dim(1))
        throw std::invalid_argument("slice_cols: out of range");
    const std::size_t r = xv.dim(0), c = xv.dim(1);
    Tensor<T> out = Tensor<T>::uninit({r, w});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = xv[i * c + j0 + j];
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, j0, w, r, c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * c + j0 + j] += g[i * w + j];
    });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
    Tape<T>& tape = *parts[0].tape;
    const std::size_t r = tape.value(parts[0].id).dim(0);
    std::size_t total = 0;
    bool needs = false;
    for (const auto& p : parts) {
        const Tensor<T>& pv = tape.value(p.id);
        if (pv.rank() != 2 || pv.dim(0) != r)
            throw std::invalid_argument("concat_cols: row counts differ");
        total += pv.dim(1);
        needs = needs || tape.needs_grad(p.id);
    }
    Tensor<T> out = Tensor<T>::uninit({r, total});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths, offsets;
    for (const auto& p : parts) {
        const Tensor<T>& pv = tape.value(p.id);
        const std::size_t w = pv.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) out.at(i, off + j) = pv.at(i, j);
        ids.push_back(p.id);
        widths.push_back(w);
        offsets.push_back(off);
        off += w;
    }
    return tape.op(std::move(out), needs,
                   [ids, widths, offsets, r, total](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (!t.needs_grad(ids[p])) continue;
            Tensor<T>& gp = t.grad(ids[p]);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < widths[p]; ++j)
                    gp[i * widths[p] + j] += g[i * total + offsets[p] + j];
        }
    });
}

// Token assembly for masked inputs:
// out_i = z0_i + pos_i where mask_i = 1, out_i = tok + pos_i otherwise.
// Masked rows of z0 receive no gradient, so masked input positions cannot
// influence anything downstream.
template <class T>
Var<T> token_mix(Var<T> z0, const std::vector<std::uint8_t>& mask, Var<T> tok, Var<T> pos) {
    Tape<T>& tape = *z0.tape;
    const Tensor<T>& zv = tape.value(z0.id);
    const Tensor<T>& tv = tape.value(tok.id);
    const Tensor<T>& pv = tape.value(pos.id);
    if (zv.rank() != 2 || !zv.same_shape(pv) || tv.rank() != 1 || tv.dim(0) != zv.dim(1))
        throw std::invalid_argument("token_mix: incompatible shapes");
    if (mask.size() != zv.dim(0))
        throw std::invalid_argument("token_mix: mask length " + std::to_string(mask.size()) +
                                    " does not match row count " + std::to_string(zv.dim(0)));
    const std::size_t r = zv.dim(0), c = zv.dim(1);
    Tensor<T> out = Tensor<T>::uninit({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out.at(i, j) = (mask[i] ? zv.at(i, j) : tv[j]) + pv.at(i, j);
    const bool needs = tape.needs_grad(z0.id) || tape.needs_grad(tok.id) || tape.needs_grad(pos.id);
    const int zid = z0.id, tid = tok.id, pid = pos.id;
    return tape.op(std::move(out), needs, [zid, tid, pid, mask, r, c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        if (t.needs_grad(zid)) {
            Tensor<T>& gz = t.grad(zid);
            for (std::size_t i = 0; i < r; ++i)
                if (mask[i])
                    for (std::size_t j = 0; j < c; ++j) gz[i * c + j] += g[i * c + j];
        }
        if (t.needs_grad(tid)) {
            Tensor<T>& gt = t.grad(tid);
            for (std::size_t i = 0; i < r; ++i)
                if (!mask[i])
                    for (std::size_t j = 0; j < c; ++j) gt[j] += g[i * c + j];
        }
        if (t.needs_grad(pid)) {
            Tensor<T>& gp = t.grad(pid);
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        }
    });
}

// out(i,j) = s * x(i,j) + shift(j), with constant s and shift (denormalize).
template <class T>
Var<T> affine_rows(Var<T> x, T s, const Tensor<T>& shift) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (xv.rank() != 2 || shift.rank() != 1 || shift.dim(0) != xv.dim(1))
        throw std::invalid_argument("affine_rows: incompatible shapes");
    const std::size_t r = xv.dim(0), c = xv.dim(1);
    Tensor<T> out = Tensor<T>::uninit(xv.shape());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = s * xv.at(i, j) + shift[j];
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, s](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad(self);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
    });
}

// Mean over rows of the row-wise L1 distance to a constant target:
// (1/rows) * sum_ij |x_ij - t_ij|. The subgradient at zero is taken as 0.
template <class T>
Var<T> l1_mean_rows(Var<T> x, const Tensor<T>& target) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (!xv.same_shape(target))
        throw std::invalid_argument("l1_mean_rows: shape mismatch " + shape_str(xv.shape()) +
                                    " vs " + shape_str(target.shape()));
    if (xv.rank() != 2) throw std::invalid_argument("l1_mean_rows: operand must be rank-2");
    const std::size_t r = xv.dim(0);
    T total = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) total += std::abs(xv[i] - target[i]);
    Tensor<T> out({std::size_t(1)});
    out[0] = total / static_cast<T>(r);
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, target, r](Tape<T>& t, int self) {
        const T gl = t.grad(self)[0] / static_cast<T>(r);
        const Tensor<T>& xv = t.value(xid);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const T d = xv[i] - target[i];
            if (d > T(0)) gx[i] += gl;
            else if (d < T(0)) gx[i] -= gl;
        }
    });
}

// Squared Frobenius distance to a constant target; optionally averaged over
// all entries.
template <class T>
Var<T> frob_sq(Var<T> x, const Tensor<T>& target, bool mean = false) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (!xv.same_shape(target))
        throw std::invalid_argument("frob_sq: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                    shape_str(target.shape()));
    const T denom = mean ? static_cast<T>(xv.size()) : T(1);
    T total = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T d = xv[i] - target[i];
        total += d * d;
    }
    Tensor<T> out({std::size_t(1)});
    out[0] = total / denom;
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, target, denom](Tape<T>& t, int self) {
        const T gl = t.grad(self)[0];
        const Tensor<T>& xv = t.value(xid);
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < xv.size(); ++i)
            gx[i] += gl * T(2) * (xv[i] - target[i]) / denom;
    });
}

// sum_ij w_ij * x_ij; generic scalar sink (used by gradient tests).
template <class T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& w) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x.id);
    if (!xv.same_shape(w)) throw std::invalid_argument("weighted_sum: shape mismatch");
    T total = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * w[i];
    Tensor<T> out({std::size_t(1)});
    out[0] = total;
    const int xid = x.id;
    return tape.op(std::move(out), tape.needs_grad(x.id), [xid, w](Tape<T>& t, int self) {
        const T gl = t.grad(self)[0];
        Tensor<T>& gx = t.grad(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gl * w[i];
    });
}

}  // namespace meshrecover
