#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "robumtl/tensor.hpp"

namespace robumtl {

// ---------------------------------------------------------------------------
// Raw kernels (accumulate into c). Plain loops, single-threaded, deterministic
// reduction order.
// ---------------------------------------------------------------------------

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void mm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            if (av == T(0)) continue;
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            if (av == T(0)) continue;
            T* crow = c + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Recording helpers
// ---------------------------------------------------------------------------

template <typename T>
Tape<T>* op_tape(std::initializer_list<const Tensor<T>*> ins) {
    for (auto* t : ins)
        if (t->defined() && t->tape()) return t->tape();
    return nullptr;
}

template <typename T>
bool op_records(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
    if (!tape || !tape->enabled()) return false;
    for (auto* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <typename T>
Tensor<T> make_output(Shape shape, Tape<T>* tape, bool rec) {
    return Tensor<T>::zeros(std::move(shape), rec, tape);
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tape<T>* tape = op_tape<T>({&a, &b});
    bool rec = op_records<T>(tape, {&a, &b});
    Tensor<T> out = make_output<T>(a.shape(), tape, rec);
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    if (rec) {
        Tensor<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc]() mutable {
            auto g = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

// a + alpha * b
template <typename T>
Tensor<T> add_scaled(const Tensor<T>& a, const Tensor<T>& b, T alpha) {
    if (a.shape() != b.shape())
        throw DimensionError("add_scaled: shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tape<T>* tape = op_tape<T>({&a, &b});
    bool rec = op_records<T>(tape, {&a, &b});
    Tensor<T> out = make_output<T>(a.shape(), tape, rec);
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + alpha * pb[i];
    if (rec) {
        Tensor<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, alpha]() mutable {
            auto g = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += alpha * g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tape<T>* tape = op_tape<T>({&a, &b});
    bool rec = op_records<T>(tape, {&a, &b});
    Tensor<T> out = make_output<T>(a.shape(), tape, rec);
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    if (rec) {
        Tensor<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc]() mutable {
            auto g = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad();
                auto vb = bc.values();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad();
                auto va = ac.values();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tape<T>* tape = op_tape<T>({&a});
    bool rec = op_records<T>(tape, {&a});
    Tensor<T> out = make_output<T>(a.shape(), tape, rec);
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = c * pa[i];
    if (rec) {
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, c]() mutable {
            auto g = oc.grad();
            auto ga = ac.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tape<T>* tape = op_tape<T>({&a});
    bool rec = op_records<T>(tape, {&a});
    Tensor<T> out = make_output<T>(a.shape(), tape, rec);
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    if (rec) {
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            auto g = oc.grad();
            auto ga = ac.grad();
            auto va = ac.values();
            for (size_t i = 0; i < g.size(); ++i)
                if (va[i] > T(0)) ga[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape) +
                             " changes element count");
    Tape<T>* tape = op_tape<T>({&a});
    bool rec = op_records<T>(tape, {&a});
    Tensor<T> out = make_output<T>(std::move(new_shape), tape, rec);
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    if (rec) {
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc]() mutable {
            auto g = oc.grad();
            auto ga = ac.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

// 4-D permutation: out[idx[perm]] = in[idx].
template <typename T>
Tensor<T> permute4(const Tensor<T>& a, const std::array<int, 4>& perm) {
    if (a.ndim() != 4) throw DimensionError("permute4: expected 4-d tensor, got " + shape_str(a.shape()));
    Shape out_shape(4);
    for (int i = 0; i < 4; ++i) out_shape[static_cast<size_t>(i)] = a.dim(perm[static_cast<size_t>(i)]);
    Tape<T>* tape = op_tape<T>({&a});
    bool rec = op_records<T>(tape, {&a});
    Tensor<T> out = make_output<T>(out_shape, tape, rec);

    const int64_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2), d3 = a.dim(3);
    int64_t in_strides[4] = {d1 * d2 * d3, d2 * d3, d3, 1};
    int64_t out_strides[4] = {out_shape[1] * out_shape[2] * out_shape[3], out_shape[2] * out_shape[3],
                              out_shape[3], 1};
    // stride of input axis perm[j] walked along output axis j
    int64_t walk[4];
    for (int j = 0; j < 4; ++j) walk[j] = in_strides[perm[static_cast<size_t>(j)]];

    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t i0 = 0; i0 < out_shape[0]; ++i0)
        for (int64_t i1 = 0; i1 < out_shape[1]; ++i1)
            for (int64_t i2 = 0; i2 < out_shape[2]; ++i2) {
                int64_t base_in = i0 * walk[0] + i1 * walk[1] + i2 * walk[2];
                int64_t base_out = i0 * out_strides[0] + i1 * out_strides[1] + i2 * out_strides[2];
                for (int64_t i3 = 0; i3 < out_shape[3]; ++i3) po[base_out + i3] = pa[base_in + i3 * walk[3]];
            }

    if (rec) {
        Tensor<T> ac = a, oc = out;
        Shape os = out_shape;
        std::array<int64_t, 4> w{walk[0], walk[1], walk[2], walk[3]};
        tape->record([ac, oc, os, w]() mutable {
            auto g = oc.grad();
            auto ga = ac.grad();
            int64_t out_strides[4] = {os[1] * os[2] * os[3], os[2] * os[3], os[3], 1};
            for (int64_t i0 = 0; i0 < os[0]; ++i0)
                for (int64_t i1 = 0; i1 < os[1]; ++i1)
                    for (int64_t i2 = 0; i2 < os[2]; ++i2) {
                        int64_t base_in = i0 * w[0] + i1 * w[1] + i2 * w[2];
                        int64_t base_out = i0 * out_strides[0] + i1 * out_strides[1] + i2 * out_strides[2];
                        for (int64_t i3 = 0; i3 < os[3]; ++i3) ga[base_in + i3 * w[3]] += g[base_out + i3];
                    }
        });
    }
    return out;
}

// Columns [c0, c1) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int64_t c0, int64_t c1) {
    if (a.ndim() != 2) throw DimensionError("slice_cols: expected 2-d tensor");
    int64_t m = a.dim(0), n = a.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") out of " + std::to_string(n) + " columns");
    Tape<T>* tape = op_tape<T>({&a});
    bool rec = op_records<T>(tape, {&a});
    int64_t w = c1 - c0;
    Tensor<T> out = make_output<T>({m, w}, tape, rec);
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < m; ++i)
        std::copy(pa + i * n + c0, pa + i * n + c1, po + i * w);
    if (rec) {
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, c0, w, n, m]() mutable {
            auto g = oc.grad();
            auto ga = ac.grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < w; ++j) ga[i * n + c0 + j] += g[i * w + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tape<T>* tape = op_tape<T>({&a, &b});
    bool rec = op_records<T>(tape, {&a, &b});
    Tensor<T> out = make_output<T>({m, n}, tape, rec);
    mm_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    if (rec) {
        Tensor<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, m, k, n]() mutable {
            auto g = oc.grad();
            if (ac.requires_grad())
                mm_nt_acc(g.data(), bc.values().data(), ac.grad().data(), m, n, k);
            if (bc.requires_grad())
                mm_tn_acc(ac.values().data(), g.data(), bc.grad().data(), m, k, n);
        });
    }
    return out;
}

// y = x * w^T (+ b), with w stored row-major [d_out x d_in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
        throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(w.shape()));
    int64_t m = x.dim(0), din = x.dim(1), dout = w.dim(0);
    if (b.defined() && b.numel() != dout)
        throw DimensionError("linear: bias length " + std::to_string(b.numel()) + " != " +
                             std::to_string(dout));
    Tape<T>* tape = op_tape<T>({&x, &w, &b});
    bool rec = op_records<T>(tape, {&x, &w, &b});
    Tensor<T> out = make_output<T>({m, dout}, tape, rec);
    mm_nt_acc(x.values().data(), w.values().data(), out.values().data(), m, din, dout);
    if (b.defined()) {
        T* po = out.values().data();
        const T* pb = b.values().data();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < dout; ++j) po[i * dout + j] += pb[j];
    }
    if (rec) {
        Tensor<T> xc = x, wc = w, bc = b, oc = out;
        tape->record([xc, wc, bc, oc, m, din, dout]() mutable {
            auto g = oc.grad();
            if (xc.requires_grad())
                mm_acc(g.data(), wc.values().data(), xc.grad().data(), m, dout, din);
            if (wc.requires_grad())
                mm_tn_acc(g.data(), xc.values().data(), wc.grad().data(), m, dout, din);
            if (bc.defined() && bc.requires_grad()) {
                auto gb = bc.grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
            }
        });
    }
    return out;
}

// Batched matmul on 3-D tensors. trans_b selects c = a * b^T per batch slice.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
        throw DimensionError("bmm: expected matching 3-d tensors, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2);
    int64_t n = trans_b ? b.dim(1) : b.dim(2);
    int64_t bk = trans_b ? b.dim(2) : b.dim(1);
    if (bk != k)
        throw DimensionError("bmm: inner dims disagree for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    Tape<T>* tape = op_tape<T>({&a, &b});
    bool rec = op_records<T>(tape, {&a, &b});
    Tensor<T> out = make_output<T>({bs, m, n}, tape, rec);
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (int64_t s = 0; s < bs; ++s) {
        if (trans_b)
            mm_nt_acc(pa + s * m * k, pb + s * n * k, po + s * m * n, m, k, n);
        else
            mm_acc(pa + s * m * k, pb + s * k * n, po + s * m * n, m, k, n);
    }
    if (rec) {
        Tensor<T> ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, bs, m, k, n, trans_b]() mutable {
            auto g = oc.grad();
            const T* pa = ac.values().data();
            const T* pb = bc.values().data();
            for (int64_t s = 0; s < bs; ++s) {
                const T* gs = g.data() + s * m * n;
                if (ac.requires_grad()) {
                    T* ga = ac.grad().data() + s * m * k;
                    if (trans_b)
                        mm_acc(gs, pb + s * n * k, ga, m, n, k);  // dA = dC * B
                    else
                        mm_nt_acc(gs, pb + s * k * n, ga, m, n, k);  // dA = dC * B^T
                }
                if (bc.requires_grad()) {
                    if (trans_b) {
                        // B[n x k]: dB = dC^T * A
                        mm_tn_acc(gs, pa + s * m * k, bc.grad().data() + s * n * k, m, n, k);
                    } else {
                        // B[k x n]: dB = A^T * dC
                        mm_tn_acc(pa + s * m * k, gs, bc.grad().data() + s * k * n, m, k, n);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax / losses
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    if (axis < 0) axis += static_cast<int>(a.ndim());
    if (axis < 0 || axis >= a.ndim())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(a.shape()));
    int64_t outer = 1, inner = 1;
    int64_t d = a.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);

    Tape<T>* tape = op_tape<T>({&a});
    bool rec = op_records<T>(tape, {&a});
    Tensor<T> out = make_output<T>(a.shape(), tape, rec);
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* src = pa + o * d * inner + in;
            T* dst = po + o * d * inner + in;
            T mx = src[0];
            for (int64_t j = 1; j < d; ++j) mx = std::max(mx, src[j * inner]);
            T sum = T(0);
            for (int64_t j = 0; j < d; ++j) {
                T e = std::exp(src[j * inner] - mx);
                dst[j * inner] = e;
                sum += e;
            }
            T inv = T(1) / sum;
            for (int64_t j = 0; j < d; ++j) dst[j * inner] *= inv;
        }
    }
    if (rec) {
        Tensor<T> ac = a, oc = out;
        tape->record([ac, oc, outer, d, inner]() mutable {
            auto g = oc.grad();
            auto ga = ac.grad();
            auto y = oc.values();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * d * inner + in;
                    T dot = T(0);
                    for (int64_t j = 0; j < d; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (int64_t j = 0; j < d; ++j)
                        ga[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                }
        });
    }
    return out;
}

// Mean negative log-softmax of the true class over rows: logits [N x C].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be 2-d");
    int64_t n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != n)
        throw ValidationError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(n) + " rows");
    for (int lab : labels)
        if (lab < 0 || lab >= c)
            throw ValidationError("cross_entropy: label " + std::to_string(lab) + " outside [0," +
                                  std::to_string(c) + ")");
    Tape<T>* tape = op_tape<T>({&logits});
    bool rec = op_records<T>(tape, {&logits});
    Tensor<T> out = make_output<T>({1}, tape, rec);
    const T* pz = logits.values().data();
    T loss = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T* row = pz + i * c;
        T mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        loss += (std::log(sum) + mx) - row[labels[static_cast<size_t>(i)]];
    }
    out.values()[0] = loss / static_cast<T>(n);
    if (rec) {
        Tensor<T> zc = logits, oc = out;
        std::vector<int> labs = labels;
        tape->record([zc, oc, labs, n, c]() mutable {
            T g0 = oc.grad()[0];
            auto gz = zc.grad();
            auto z = zc.values();
            T invn = T(1) / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) {
                const T* row = z.data() + i * c;
                T mx = row[0];
                for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                T sum = T(0);
                for (int64_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
                T inv = T(1) / sum;
                for (int64_t j = 0; j < c; ++j) {
                    T p = std::exp(row[j] - mx) * inv;
                    T onehot = (j == labs[static_cast<size_t>(i)]) ? T(1) : T(0);
                    gz[i * c + j] += g0 * (p - onehot) * invn;
                }
            }
        });
    }
    return out;
}

// Mean binary cross-entropy on logits, stabilized form.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape())
        throw DimensionError("bce_with_logits: shapes " + shape_str(logits.shape()) + " vs " +
                             shape_str(targets.shape()));
    Tape<T>* tape = op_tape<T>({&logits});
    bool rec = op_records<T>(tape, {&logits});
    Tensor<T> out = make_output<T>({1}, tape, rec);
    const T* pz = logits.values().data();
    const T* py = targets.values().data();
    int64_t n = logits.numel();
    T loss = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T z = pz[i];
        loss += std::max(z, T(0)) - z * py[i] + std::log1p(std::exp(-std::abs(z)));
    }
    out.values()[0] = loss / static_cast<T>(n);
    if (rec) {
        Tensor<T> zc = logits, yc = targets, oc = out;
        tape->record([zc, yc, oc, n]() mutable {
            T g0 = oc.grad()[0];
            auto gz = zc.grad();
            auto z = zc.values();
            auto y = yc.values();
            T invn = T(1) / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) {
                T sig = T(1) / (T(1) + std::exp(-z[i]));
                gz[i] += g0 * (sig - y[i]) * invn;
            }
        });
    }
    return out;
}

// Mean squared error.
template <typename T>
Tensor<T> l2_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape() != target.shape())
        throw DimensionError("l2_loss: shapes " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    Tape<T>* tape = op_tape<T>({&pred});
    bool rec = op_records<T>(tape, {&pred});
    Tensor<T> out = make_output<T>({1}, tape, rec);
    const T* pp = pred.values().data();
    const T* pt = target.values().data();
    int64_t n = pred.numel();
    T loss = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T d = pp[i] - pt[i];
        loss += d * d;
    }
    out.values()[0] = loss / static_cast<T>(n);
    if (rec) {
        Tensor<T> pc = pred, tc = target, oc = out;
        tape->record([pc, tc, oc, n]() mutable {
            T g0 = oc.grad()[0];
            auto gp = pc.grad();
            auto p = pc.values();
            auto t = tc.values();
            T k = T(2) / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) gp[i] += g0 * k * (p[i] - t[i]);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions and pooling (NCHW)
// ---------------------------------------------------------------------------

namespace detail {
inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t ho, int64_t wo, T* cols) {
    // cols layout: [c*kh*kw, ho*wo]
    int64_t p = ho * wo;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* dst = cols + ((ch * kh + ky) * kw + kx) * p;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        for (int64_t ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (ch * h + iy) * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_acc(const T* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* x) {
    int64_t p = ho * wo;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* src = cols + ((ch * kh + ky) * kw + kx) * p;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (ch * h + iy) * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                    }
                }
            }
}
}  // namespace detail

// Cross-correlation (no kernel flip). x [N,Cin,H,W], w [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>(),
                 int64_t stride = 1, int64_t pad = 0) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimensionError("conv2d: expected 4-d input and kernel");
    int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin)
        throw DimensionError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                             " input channels, input has " + std::to_string(cin));
    if (kh > h + 2 * pad || kw > wd + 2 * pad)
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than padded input " + std::to_string(h + 2 * pad) + "x" +
                             std::to_string(wd + 2 * pad));
    if (b.defined() && b.numel() != cout)
        throw DimensionError("conv2d: bias length mismatch");
    int64_t ho = detail::conv_out_dim(h, kh, stride, pad);
    int64_t wo = detail::conv_out_dim(wd, kw, stride, pad);

    Tape<T>* tape = op_tape<T>({&x, &w, &b});
    bool rec = op_records<T>(tape, {&x, &w, &b});
    Tensor<T> out = make_output<T>({n, cout, ho, wo}, tape, rec);

    int64_t k = cin * kh * kw, p = ho * wo;
    std::vector<T> cols(static_cast<size_t>(k * p));
    const T* px = x.values().data();
    const T* pw = w.values().data();
    T* po = out.values().data();
    for (int64_t s = 0; s < n; ++s) {
        detail::im2col(px + s * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo, cols.data());
        mm_acc(pw, cols.data(), po + s * cout * p, cout, k, p);
        if (b.defined()) {
            const T* pb = b.values().data();
            for (int64_t oc = 0; oc < cout; ++oc) {
                T* dst = po + (s * cout + oc) * p;
                for (int64_t i = 0; i < p; ++i) dst[i] += pb[oc];
            }
        }
    }
    if (rec) {
        Tensor<T> xc = x, wc = w, bc = b, oc = out;
        tape->record([xc, wc, bc, oc, n, cin, h, wd, cout, kh, kw, stride, pad, ho, wo]() mutable {
            int64_t k = cin * kh * kw, p = ho * wo;
            std::vector<T> cols(static_cast<size_t>(k * p));
            std::vector<T> dcols(static_cast<size_t>(k * p));
            auto g = oc.grad();
            const T* px = xc.values().data();
            const T* pw = wc.values().data();
            for (int64_t s = 0; s < n; ++s) {
                const T* gs = g.data() + s * cout * p;
                detail::im2col(px + s * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo,
                               cols.data());
                if (wc.requires_grad())
                    mm_nt_acc(gs, cols.data(), wc.grad().data(), cout, p, k);
                if (xc.requires_grad()) {
                    std::fill(dcols.begin(), dcols.end(), T(0));
                    mm_tn_acc(pw, gs, dcols.data(), cout, k, p);
                    detail::col2im_acc(dcols.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                                       xc.grad().data() + s * cin * h * wd);
                }
                if (bc.defined() && bc.requires_grad()) {
                    auto gb = bc.grad();
                    for (int64_t ocn = 0; ocn < cout; ++ocn) {
                        T acc = T(0);
                        const T* src = gs + ocn * p;
                        for (int64_t i = 0; i < p; ++i) acc += src[i];
                        gb[ocn] += acc;
                    }
                }
            }
        });
    }
    return out;
}

// Per-channel spatial convolution. x [N,C,H,W], w [C,kh,kw].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>(),
                           int64_t stride = 1, int64_t pad = 0) {
    if (x.ndim() != 4 || w.ndim() != 3)
        throw DimensionError("depthwise_conv2d: expected 4-d input and 3-d kernel");
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    int64_t kh = w.dim(1), kw = w.dim(2);
    if (w.dim(0) != c)
        throw DimensionError("depthwise_conv2d: kernel has " + std::to_string(w.dim(0)) +
                             " filters for " + std::to_string(c) + " channels");
    if (kh > h + 2 * pad || kw > wd + 2 * pad)
        throw DimensionError("depthwise_conv2d: kernel larger than padded input");
    if (b.defined() && b.numel() != c) throw DimensionError("depthwise_conv2d: bias length mismatch");
    int64_t ho = detail::conv_out_dim(h, kh, stride, pad);
    int64_t wo = detail::conv_out_dim(wd, kw, stride, pad);

    Tape<T>* tape = op_tape<T>({&x, &w, &b});
    bool rec = op_records<T>(tape, {&x, &w, &b});
    Tensor<T> out = make_output<T>({n, c, ho, wo}, tape, rec);
    const T* px = x.values().data();
    const T* pw = w.values().data();
    const T* pb = b.defined() ? b.values().data() : nullptr;
    T* po = out.values().data();
    for (int64_t s = 0; s < n; ++s)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* xp = px + (s * c + ch) * h * wd;
            const T* wp = pw + ch * kh * kw;
            T* op_ = po + (s * c + ch) * ho * wo;
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    T acc = pb ? pb[ch] : T(0);
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            acc += xp[iy * wd + ix] * wp[ky * kw + kx];
                        }
                    }
                    op_[oy * wo + ox] = acc;
                }
        }
    if (rec) {
        Tensor<T> xc = x, wc = w, bc = b, oc = out;
        tape->record([xc, wc, bc, oc, n, c, h, wd, kh, kw, stride, pad, ho, wo]() mutable {
            auto g = oc.grad();
            const T* px = xc.values().data();
            const T* pw = wc.values().data();
            for (int64_t s = 0; s < n; ++s)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T* gs = g.data() + (s * c + ch) * ho * wo;
                    const T* xp = px + (s * c + ch) * h * wd;
                    const T* wp = pw + ch * kh * kw;
                    for (int64_t oy = 0; oy < ho; ++oy)
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            T go = gs[oy * wo + ox];
                            if (go == T(0)) continue;
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                int64_t iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    int64_t ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= wd) continue;
                                    if (wc.requires_grad())
                                        wc.grad()[ch * kh * kw + ky * kw + kx] += go * xp[iy * wd + ix];
                                    if (xc.requires_grad())
                                        xc.grad()[(s * c + ch) * h * wd + iy * wd + ix] +=
                                            go * wp[ky * kw + kx];
                                }
                            }
                            if (bc.defined() && bc.requires_grad()) bc.grad()[ch] += go;
                        }
                }
        });
    }
    return out;
}

// Depthwise separable convolution: per-channel spatial conv followed by a
// 1x1 channel-mixing (pointwise) conv.
template <typename T>
Tensor<T> depthwise_separable_conv(const Tensor<T>& x, const Tensor<T>& dw_kernel,
                                   const Tensor<T>& dw_bias, const Tensor<T>& pw_kernel,
                                   const Tensor<T>& pw_bias, int64_t stride = 1, int64_t pad = 0) {
    if (pw_kernel.ndim() != 4 || pw_kernel.dim(2) != 1 || pw_kernel.dim(3) != 1)
        throw DimensionError("depthwise_separable_conv: pointwise kernel must be 1x1");
    Tensor<T> mid = depthwise_conv2d(x, dw_kernel, dw_bias, stride, pad);
    return conv2d(mid, pw_kernel, pw_bias, 1, 0);
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int64_t k, int64_t stride = 0) {
    if (x.ndim() != 4) throw DimensionError("maxpool2d: expected 4-d input");
    if (stride == 0) stride = k;
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h <= 0 || w <= 0) throw DimensionError("maxpool2d: empty spatial dims");
    if (k > h || k > w)
        throw DimensionError("maxpool2d: window " + std::to_string(k) + " exceeds spatial dims " +
                             std::to_string(h) + "x" + std::to_string(w));
    int64_t ho = (h - k) / stride + 1;
    int64_t wo = (w - k) / stride + 1;
    Tape<T>* tape = op_tape<T>({&x});
    bool rec = op_records<T>(tape, {&x});
    Tensor<T> out = make_output<T>({n, c, ho, wo}, tape, rec);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    const T* px = x.values().data();
    T* po = out.values().data();
    int64_t oi = 0;
    for (int64_t s = 0; s < n; ++s)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* xp = px + (s * c + ch) * h * w;
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox, ++oi) {
                    int64_t besti = (oy * stride) * w + ox * stride;
                    T best = xp[besti];
                    for (int64_t ky = 0; ky < k; ++ky)
                        for (int64_t kx = 0; kx < k; ++kx) {
                            int64_t idx = (oy * stride + ky) * w + ox * stride + kx;
                            if (xp[idx] > best) {
                                best = xp[idx];
                                besti = idx;
                            }
                        }
                    po[oi] = best;
                    (*argmax)[static_cast<size_t>(oi)] = (s * c + ch) * h * w + besti;
                }
        }
    if (rec) {
        Tensor<T> xc = x, oc = out;
        tape->record([xc, oc, argmax]() mutable {
            auto g = oc.grad();
            auto gx = xc.grad();
            for (size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
        });
    }
    return out;
}

// Global average pool to 1x1, returned as [N, C].
template <typename T>
Tensor<T> adaptive_avgpool(const Tensor<T>& x) {
    if (x.ndim() != 4) throw DimensionError("adaptive_avgpool: expected 4-d input");
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h <= 0 || w <= 0) throw DimensionError("adaptive_avgpool: empty spatial dims");
    Tape<T>* tape = op_tape<T>({&x});
    bool rec = op_records<T>(tape, {&x});
    Tensor<T> out = make_output<T>({n, c}, tape, rec);
    const T* px = x.values().data();
    T* po = out.values().data();
    T inv = T(1) / static_cast<T>(h * w);
    for (int64_t s = 0; s < n; ++s)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* xp = px + (s * c + ch) * h * w;
            T acc = T(0);
            for (int64_t i = 0; i < h * w; ++i) acc += xp[i];
            po[s * c + ch] = acc * inv;
        }
    if (rec) {
        Tensor<T> xc = x, oc = out;
        tape->record([xc, oc, n, c, h, w]() mutable {
            auto g = oc.grad();
            auto gx = xc.grad();
            T inv = T(1) / static_cast<T>(h * w);
            for (int64_t s = 0; s < n; ++s)
                for (int64_t ch = 0; ch < c; ++ch) {
                    T spread = g[s * c + ch] * inv;
                    T* dst = gx.data() + (s * c + ch) * h * w;
                    for (int64_t i = 0; i < h * w; ++i) dst[i] += spread;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / resampling
// ---------------------------------------------------------------------------

// Layer norm over the last dimension of a 2-D tensor.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    if (x.ndim() != 2) throw DimensionError("layer_norm: expected 2-d input");
    int64_t m = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d)
        throw DimensionError("layer_norm: scale/shift length mismatch");
    Tape<T>* tape = op_tape<T>({&x, &gamma, &beta});
    bool rec = op_records<T>(tape, {&x, &gamma, &beta});
    Tensor<T> out = make_output<T>({m, d}, tape, rec);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(m * d));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(m));
    const T* px = x.values().data();
    const T* pg = gamma.values().data();
    const T* pb = beta.values().data();
    T* po = out.values().data();
    for (int64_t i = 0; i < m; ++i) {
        const T* row = px + i * d;
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) {
            T dv = row[j] - mean;
            var += dv * dv;
        }
        var /= static_cast<T>(d);
        T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < d; ++j) {
            T xh = (row[j] - mean) * is;
            (*xhat)[static_cast<size_t>(i * d + j)] = xh;
            po[i * d + j] = xh * pg[j] + pb[j];
        }
    }
    if (rec) {
        Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
        tape->record([xc, gc, bc, oc, xhat, inv_std, m, d]() mutable {
            auto g = oc.grad();
            const T* pg = gc.values().data();
            for (int64_t i = 0; i < m; ++i) {
                const T* grow = g.data() + i * d;
                const T* xh = xhat->data() + i * d;
                if (gc.requires_grad()) {
                    auto gg = gc.grad();
                    for (int64_t j = 0; j < d; ++j) gg[j] += grow[j] * xh[j];
                }
                if (bc.requires_grad()) {
                    auto gb = bc.grad();
                    for (int64_t j = 0; j < d; ++j) gb[j] += grow[j];
                }
                if (xc.requires_grad()) {
                    T is = (*inv_std)[static_cast<size_t>(i)];
                    T sum_dxh = T(0), sum_dxh_xh = T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        T dxh = grow[j] * pg[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    T invd = T(1) / static_cast<T>(d);
                    auto gx = xc.grad();
                    for (int64_t j = 0; j < d; ++j) {
                        T dxh = grow[j] * pg[j];
                        gx[i * d + j] += is * (dxh - sum_dxh * invd - xh[j] * (sum_dxh_xh * invd));
                    }
                }
            }
        });
    }
    return out;
}

// Bilinear upsampling (align_corners = false). x [N,C,h,w] -> [N,C,H,W].
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
    if (x.ndim() != 4) throw DimensionError("bilinear_upsample: expected 4-d input");
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tape<T>* tape = op_tape<T>({&x});
    bool rec = op_records<T>(tape, {&x});
    Tensor<T> out = make_output<T>({n, c, out_h, out_w}, tape, rec);

    struct Tap {
        int64_t i0, i1;
        T w0, w1;
    };
    auto make_taps = [](int64_t in, int64_t outn) {
        std::vector<Tap> taps(static_cast<size_t>(outn));
        double r = static_cast<double>(in) / static_cast<double>(outn);
        for (int64_t o = 0; o < outn; ++o) {
            double src = (static_cast<double>(o) + 0.5) * r - 0.5;
            if (src < 0) src = 0;
            int64_t i0 = static_cast<int64_t>(src);
            if (i0 > in - 1) i0 = in - 1;
            int64_t i1 = std::min(i0 + 1, in - 1);
            T f = static_cast<T>(src - static_cast<double>(i0));
            taps[static_cast<size_t>(o)] = {i0, i1, T(1) - f, f};
        }
        return taps;
    };
    auto ty = std::make_shared<std::vector<Tap>>(make_taps(h, out_h));
    auto tx = std::make_shared<std::vector<Tap>>(make_taps(w, out_w));

    const T* px = x.values().data();
    T* po = out.values().data();
    for (int64_t s = 0; s < n * c; ++s) {
        const T* xp = px + s * h * w;
        T* op_ = po + s * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = (*ty)[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const Tap& bb = (*tx)[static_cast<size_t>(ox)];
                op_[oy * out_w + ox] = a.w0 * (bb.w0 * xp[a.i0 * w + bb.i0] + bb.w1 * xp[a.i0 * w + bb.i1]) +
                                       a.w1 * (bb.w0 * xp[a.i1 * w + bb.i0] + bb.w1 * xp[a.i1 * w + bb.i1]);
            }
        }
    }
    if (rec) {
        Tensor<T> xc = x, oc = out;
        tape->record([xc, oc, ty, tx, n, c, h, w, out_h, out_w]() mutable {
            auto g = oc.grad();
            auto gx = xc.grad();
            for (int64_t s = 0; s < n * c; ++s) {
                const T* gp = g.data() + s * out_h * out_w;
                T* dst = gx.data() + s * h * w;
                for (int64_t oy = 0; oy < out_h; ++oy) {
                    const Tap& a = (*ty)[static_cast<size_t>(oy)];
                    for (int64_t ox = 0; ox < out_w; ++ox) {
                        const Tap& bb = (*tx)[static_cast<size_t>(ox)];
                        T go = gp[oy * out_w + ox];
                        dst[a.i0 * w + bb.i0] += go * a.w0 * bb.w0;
                        dst[a.i0 * w + bb.i1] += go * a.w0 * bb.w1;
                        dst[a.i1 * w + bb.i0] += go * a.w1 * bb.w0;
                        dst[a.i1 * w + bb.i1] += go * a.w1 * bb.w1;
                    }
                }
            }
        });
    }
    return out;
}

// [N,C,H,W] -> token rows [(N*gh*gw) x (C*p*p)] over p x p patches.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int64_t p) {
    if (x.ndim() != 4) throw DimensionError("patchify: expected 4-d input");
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % p != 0 || w % p != 0)
        throw DimensionError("patchify: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by patch " + std::to_string(p));
    int64_t gh = h / p, gw = w / p;
    Tape<T>* tape = op_tape<T>({&x});
    bool rec = op_records<T>(tape, {&x});
    Tensor<T> out = make_output<T>({n * gh * gw, c * p * p}, tape, rec);
    const T* px = x.values().data();
    T* po = out.values().data();
    int64_t row_w = c * p * p;
    for (int64_t s = 0; s < n; ++s)
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                T* dst = po + ((s * gh + gy) * gw + gx) * row_w;
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t iy = 0; iy < p; ++iy)
                        for (int64_t ix = 0; ix < p; ++ix)
                            dst[(ch * p + iy) * p + ix] =
                                px[((s * c + ch) * h + gy * p + iy) * w + gx * p + ix];
            }
    if (rec) {
        Tensor<T> xc = x, oc = out;
        tape->record([xc, oc, n, c, h, w, p]() mutable {
            int64_t gh = h / p, gw = w / p, row_w = c * p * p;
            auto g = oc.grad();
            auto gx_ = xc.grad();
            for (int64_t s = 0; s < n; ++s)
                for (int64_t gy = 0; gy < gh; ++gy)
                    for (int64_t gx = 0; gx < gw; ++gx) {
                        const T* src = g.data() + ((s * gh + gy) * gw + gx) * row_w;
                        for (int64_t ch = 0; ch < c; ++ch)
                            for (int64_t iy = 0; iy < p; ++iy)
                                for (int64_t ix = 0; ix < p; ++ix)
                                    gx_[((s * c + ch) * h + gy * p + iy) * w + gx * p + ix] +=
                                        src[(ch * p + iy) * p + ix];
                    }
        });
    }
    return out;
}

// Token rows [(N*h*w) x C] -> image layout [N,C,h,w].
template <typename T>
Tensor<T> tokens_to_space(const Tensor<T>& x, int64_t n, int64_t h, int64_t w) {
    if (x.ndim() != 2 || x.dim(0) != n * h * w)
        throw DimensionError("tokens_to_space: row count mismatch for " + shape_str(x.shape()));
    int64_t c = x.dim(1);
    Tensor<T> t4 = reshape(x, {n, h, w, c});
    Tensor<T> perm = permute4(t4, {0, 3, 1, 2});
    return perm;
}

// Image layout [N,C,h,w] -> token rows [(N*h*w) x C].
template <typename T>
Tensor<T> space_to_tokens(const Tensor<T>& x) {
    if (x.ndim() != 4) throw DimensionError("space_to_tokens: expected 4-d input");
    Tensor<T> perm = permute4(x, {0, 2, 3, 1});
    return reshape(perm, {x.dim(0) * x.dim(2) * x.dim(3), x.dim(1)});
}

}  // namespace robumtl
