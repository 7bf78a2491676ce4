#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdup/kernels.hpp"
#include "mdup/tensor.hpp"

namespace mdup {

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (!t.defined() || t.ndim() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor, got " +
                                    (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

template <typename T>
std::vector<T>* grad_of(Node<T>& parent) {
    return parent.requires_grad ? &parent.ensure_grad() : nullptr;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw std::invalid_argument("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    kernels::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (auto* ga = detail::grad_of(pa)) kernels::gemm_nt_acc(self.grad.data(), pb.data.data(), ga->data(), m, k, n);
        if (auto* gb = detail::grad_of(pb)) kernels::gemm_tn_acc(pa.data.data(), self.grad.data(), gb->data(), m, k, n);
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_matrix(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    return make_result<T>({c, r}, kernels::transpose(a.data().data(), r, c), {a}, [r, c](Node<T>& self) {
        auto* ga = detail::grad_of(*self.parents[0]);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += self.grad[j * r + i];
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& p : self.parents)
            if (auto* g = detail::grad_of(*p))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (auto* g = detail::grad_of(pa))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pb.data[i];
        if (auto* g = detail::grad_of(pb))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * pa.data[i];
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / (T(1) + std::exp(-a[i]));
    return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto* g = detail::grad_of(pa);
        for (std::size_t i = 0; i < g->size(); ++i) {
            const T x = pa.data[i];
            const T sig = T(1) / (T(1) + std::exp(-x));
            (*g)[i] += self.grad[i] * sig * (T(1) + x * (T(1) - sig));
        }
    });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * a[i] * (T(1) + std::erf(a[i] * inv_sqrt2));
    return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        auto& pa = *self.parents[0];
        auto* g = detail::grad_of(pa);
        for (std::size_t i = 0; i < g->size(); ++i) {
            const T x = pa.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            (*g)[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// Per-row x / sqrt(mean(x^2) + eps) * gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
    if (!(eps > T(0))) throw std::invalid_argument("rms_norm: eps must be positive");
    const std::size_t rows = x.rows(), d = x.cols();
    if (gain.numel() != d) {
        throw std::invalid_argument("rms_norm: gain " + shape_str(gain.shape()) + " does not match last extent of " +
                                    shape_str(x.shape()));
    }
    auto inv_rms = std::make_shared<std::vector<T>>(rows);
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * d;
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const T inv = T(1) / std::sqrt(ss / T(d) + eps);
        (*inv_rms)[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * gain[j];
    }
    return make_result<T>(x.shape(), std::move(out), {x, gain}, [rows, d, inv_rms](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto* gx = detail::grad_of(px);
        auto* gg = detail::grad_of(pg);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = px.data.data() + r * d;
            const T* dy = self.grad.data() + r * d;
            const T inv = (*inv_rms)[r];
            if (gg)
                for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * xr[j] * inv;
            if (gx) {
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += dy[j] * pg.data[j] * xr[j];
                const T coef = inv * inv * inv * dot / T(d);
                for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += inv * pg.data[j] * dy[j] - coef * xr[j];
            }
        }
    });
}

// Rotary position encoding on (T x n_heads*head_dim); dimension i pairs with
// i + head_dim/2 inside each head.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int32_t> positions, std::size_t n_heads, double base) {
    detail::require_matrix(x, "rope");
    const std::size_t len = x.dim(0), width = x.dim(1);
    if (positions.size() != len) throw std::invalid_argument("rope: positions length does not match sequence length");
    if (n_heads == 0 || width % n_heads != 0 || (width / n_heads) % 2 != 0) {
        throw std::invalid_argument("rope: width " + std::to_string(width) + " not splittable into even heads");
    }
    const std::size_t hd = width / n_heads, half = hd / 2;
    auto cs = std::make_shared<std::vector<T>>(len * half * 2);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double angle = static_cast<double>(positions[t]) * freq;
            (*cs)[(t * half + i) * 2] = static_cast<T>(std::cos(angle));
            (*cs)[(t * half + i) * 2 + 1] = static_cast<T>(std::sin(angle));
        }
    }
    std::vector<T> out(x.numel());
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t o = t * width + h * hd;
                const T c = (*cs)[(t * half + i) * 2], s = (*cs)[(t * half + i) * 2 + 1];
                const T x1 = x[o + i], x2 = x[o + i + half];
                out[o + i] = x1 * c - x2 * s;
                out[o + i + half] = x1 * s + x2 * c;
            }
    return make_result<T>(x.shape(), std::move(out), {x}, [len, width, n_heads, hd, half, cs](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t h = 0; h < n_heads; ++h)
                for (std::size_t i = 0; i < half; ++i) {
                    const std::size_t o = t * width + h * hd;
                    const T c = (*cs)[(t * half + i) * 2], s = (*cs)[(t * half + i) * 2 + 1];
                    const T d1 = self.grad[o + i], d2 = self.grad[o + i + half];
                    (*g)[o + i] += d1 * c + d2 * s;
                    (*g)[o + i + half] += d2 * c - d1 * s;
                }
    });
}

// Causal scaled dot-product attention over (T x n_heads*head_dim) inputs.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads) {
    detail::require_matrix(q, "causal_attention");
    detail::require_same_shape(q, k, "causal_attention");
    detail::require_same_shape(q, v, "causal_attention");
    const std::size_t len = q.dim(0), width = q.dim(1);
    if (n_heads == 0 || width % n_heads != 0) throw std::invalid_argument("causal_attention: bad head count");
    const std::size_t hd = width / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    // probs[h][t][s] for s <= t, stored densely (upper triangle zero)
    auto probs = std::make_shared<std::vector<T>>(n_heads * len * len, T(0));
    std::vector<T> out(len * width, T(0));
    const T* Q = q.data().data();
    const T* K = k.data().data();
    const T* V = v.data().data();
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t t = 0; t < len; ++t) {
            T* p = probs->data() + (h * len + t) * len;
            const T* qt = Q + t * width + h * hd;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t s = 0; s <= t; ++s) {
                const T* ks = K + s * width + h * hd;
                T dot = 0;
                for (std::size_t i = 0; i < hd; ++i) dot += qt[i] * ks[i];
                p[s] = dot * scale;
                mx = std::max(mx, p[s]);
            }
            T z = 0;
            for (std::size_t s = 0; s <= t; ++s) {
                p[s] = std::exp(p[s] - mx);
                z += p[s];
            }
            T* ot = out.data() + t * width + h * hd;
            for (std::size_t s = 0; s <= t; ++s) {
                p[s] /= z;
                const T* vs = V + s * width + h * hd;
                for (std::size_t i = 0; i < hd; ++i) ot[i] += p[s] * vs[i];
            }
        }
    }
    return make_result<T>(q.shape(), std::move(out), {q, k, v},
                          [len, width, n_heads, hd, scale, probs](Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        auto* gq = detail::grad_of(pq);
        auto* gk = detail::grad_of(pk);
        auto* gv = detail::grad_of(pv);
        std::vector<T> dp(len);
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t t = 0; t < len; ++t) {
                const T* p = probs->data() + (h * len + t) * len;
                const T* dot_ = self.grad.data() + t * width + h * hd;
                T rowsum = 0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const T* vs = pv.data.data() + s * width + h * hd;
                    T acc = 0;
                    for (std::size_t i = 0; i < hd; ++i) acc += dot_[i] * vs[i];
                    dp[s] = acc;
                    rowsum += acc * p[s];
                    if (gv) {
                        T* gvs = gv->data() + s * width + h * hd;
                        for (std::size_t i = 0; i < hd; ++i) gvs[i] += p[s] * dot_[i];
                    }
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const T ds = p[s] * (dp[s] - rowsum) * scale;
                    if (gq) {
                        T* gqt = gq->data() + t * width + h * hd;
                        const T* ks = pk.data.data() + s * width + h * hd;
                        for (std::size_t i = 0; i < hd; ++i) gqt[i] += ds * ks[i];
                    }
                    if (gk) {
                        T* gks = gk->data() + s * width + h * hd;
                        const T* qt = pq.data.data() + t * width + h * hd;
                        for (std::size_t i = 0; i < hd; ++i) gks[i] += ds * qt[i];
                    }
                }
            }
        }
    });
}

// x is (T x C), kernel is (K x C); tap K-1 multiplies the current step and
// earlier steps are zero-padded, so output[t] only sees x[t-K+1 .. t].
template <typename T>
Tensor<T> causal_depthwise_conv(const Tensor<T>& x, const Tensor<T>& kernel) {
    detail::require_matrix(x, "causal_depthwise_conv");
    detail::require_matrix(kernel, "causal_depthwise_conv");
    const std::size_t len = x.dim(0), ch = x.dim(1), width = kernel.dim(0);
    if (kernel.dim(1) != ch) {
        throw std::invalid_argument("causal_depthwise_conv: kernel " + shape_str(kernel.shape()) +
                                    " has a different channel count than input " + shape_str(x.shape()));
    }
    if (width == 0) throw std::invalid_argument("causal_depthwise_conv: kernel width must be >= 1");
    std::vector<T> out(len * ch, T(0));
    for (std::size_t t = 0; t < len; ++t) {
        T* o = out.data() + t * ch;
        for (std::size_t j = 0; j < width; ++j) {
            const std::size_t back = width - 1 - j;
            if (back > t) continue;
            const T* xs = x.data().data() + (t - back) * ch;
            const T* kj = kernel.data().data() + j * ch;
            for (std::size_t c = 0; c < ch; ++c) o[c] += kj[c] * xs[c];
        }
    }
    return make_result<T>({len, ch}, std::move(out), {x, kernel}, [len, ch, width](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto* gx = detail::grad_of(px);
        auto* gk = detail::grad_of(pk);
        for (std::size_t t = 0; t < len; ++t) {
            const T* dy = self.grad.data() + t * ch;
            for (std::size_t j = 0; j < width; ++j) {
                const std::size_t back = width - 1 - j;
                if (back > t) continue;
                const std::size_t src = (t - back) * ch;
                if (gx)
                    for (std::size_t c = 0; c < ch; ++c) (*gx)[src + c] += pk.data[j * ch + c] * dy[c];
                if (gk)
                    for (std::size_t c = 0; c < ch; ++c) (*gk)[j * ch + c] += px.data[src + c] * dy[c];
            }
        }
    });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "concat_cols");
    detail::require_matrix(b, "concat_cols");
    if (a.dim(0) != b.dim(0)) throw std::invalid_argument("concat_cols: row counts differ");
    const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cw = ca + cb;
    std::vector<T> out(rows * cw);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.data().data() + r * ca, ca, out.data() + r * cw);
        std::copy_n(b.data().data() + r * cb, cb, out.data() + r * cw + ca);
    }
    return make_result<T>({rows, cw}, std::move(out), {a, b}, [rows, ca, cb, cw](Node<T>& self) {
        if (auto* g = detail::grad_of(*self.parents[0]))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < ca; ++c) (*g)[r * ca + c] += self.grad[r * cw + c];
        if (auto* g = detail::grad_of(*self.parents[1]))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cb; ++c) (*g)[r * cb + c] += self.grad[r * cw + ca + c];
    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
    detail::require_matrix(a, "slice_cols");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (start + count > cols) throw std::invalid_argument("slice_cols: range exceeds " + shape_str(a.shape()));
    std::vector<T> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data().data() + r * cols + start, count, out.data() + r * count);
    return make_result<T>({rows, count}, std::move(out), {a}, [rows, cols, start, count](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < count; ++c) (*g)[r * cols + start + c] += self.grad[r * count + c];
    });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
    detail::require_matrix(a, "slice_rows");
    const std::size_t cols = a.dim(1);
    if (start + count > a.dim(0)) throw std::invalid_argument("slice_rows: range exceeds " + shape_str(a.shape()));
    std::vector<T> out(a.data().begin() + start * cols, a.data().begin() + (start + count) * cols);
    return make_result<T>({count, cols}, std::move(out), {a}, [start, cols](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[start * cols + i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "concat_rows");
    detail::require_matrix(b, "concat_rows");
    if (a.dim(1) != b.dim(1)) throw std::invalid_argument("concat_rows: column counts differ");
    std::vector<T> out(a.values());
    out.insert(out.end(), b.values().begin(), b.values().end());
    const std::size_t na = a.numel();
    return make_result<T>({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {a, b}, [na](Node<T>& self) {
        if (auto* g = detail::grad_of(*self.parents[0]))
            for (std::size_t i = 0; i < na; ++i) (*g)[i] += self.grad[i];
        if (auto* g = detail::grad_of(*self.parents[1]))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[na + i];
    });
}

// Row-wise select: row r comes from `a` when pick_a[r], else from `b`.
template <typename T>
Tensor<T> where_rows(const std::vector<bool>& pick_a, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "where_rows");
    detail::require_same_shape(a, b, "where_rows");
    if (pick_a.size() != a.dim(0)) throw std::invalid_argument("where_rows: selector length does not match rows");
    const std::size_t cols = a.dim(1);
    std::vector<T> out(a.numel());
    for (std::size_t r = 0; r < pick_a.size(); ++r) {
        const auto& src = pick_a[r] ? a : b;
        std::copy_n(src.data().data() + r * cols, cols, out.data() + r * cols);
    }
    return make_result<T>(a.shape(), std::move(out), {a, b}, [pick_a, cols](Node<T>& self) {
        auto* ga = detail::grad_of(*self.parents[0]);
        auto* gb = detail::grad_of(*self.parents[1]);
        for (std::size_t r = 0; r < pick_a.size(); ++r) {
            auto* g = pick_a[r] ? ga : gb;
            if (!g) continue;
            for (std::size_t c = 0; c < cols; ++c) (*g)[r * cols + c] += self.grad[r * cols + c];
        }
    });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
    detail::require_matrix(table, "embedding");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<T> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw std::out_of_range("embedding: token id " + std::to_string(ids[t]) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
        std::copy_n(table.data().data() + ids[t] * d, d, out.data() + t * d);
    }
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return make_result<T>({ids.size(), d}, std::move(out), {table}, [idv, d](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (std::size_t t = 0; t < idv.size(); ++t)
            for (std::size_t c = 0; c < d; ++c) (*g)[idv[t] * d + c] += self.grad[t * d + c];
    });
}

// Mean negative log-likelihood over rows whose mask bit is set. Masked-out
// rows contribute neither loss nor gradient.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                std::span<const std::uint8_t> mask) {
    detail::require_matrix(logits, "softmax_cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw std::invalid_argument("softmax_cross_entropy: need one target and one mask bit per row");
    }
    std::size_t count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    if (count == 0) throw std::invalid_argument("softmax_cross_entropy: every position is masked out");
    auto probs = std::make_shared<std::vector<T>>(rows * vocab, T(0));
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(targets[r]) + " out of range");
        }
        const T* lr = logits.data().data() + r * vocab;
        T* pr = probs->data() + r * vocab;
        T mx = lr[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
        T z = 0;
        for (std::size_t j = 0; j < vocab; ++j) {
            pr[j] = std::exp(lr[j] - mx);
            z += pr[j];
        }
        for (std::size_t j = 0; j < vocab; ++j) pr[j] /= z;
        total += -(lr[targets[r]] - mx - std::log(z));
    }
    const T inv_count = T(1) / static_cast<T>(count);
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    std::vector<std::uint8_t> mv(mask.begin(), mask.end());
    return make_result<T>({1}, {total * inv_count}, {logits}, [probs, tv, mv, vocab, inv_count](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        const T up = self.grad[0] * inv_count;
        for (std::size_t r = 0; r < tv.size(); ++r) {
            if (!mv[r]) continue;
            const T* pr = probs->data() + r * vocab;
            T* gr = g->data() + r * vocab;
            for (std::size_t j = 0; j < vocab; ++j) gr[j] += up * pr[j];
            gr[tv[r]] -= up;
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (T v : a.data()) total += v;
    return make_result<T>({1}, {total}, {a}, [](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (auto& gi : *g) gi += self.grad[0];
    });
}

// sum(a * w) for a constant weight vector; used to project outputs to a scalar.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::vector<T> w) {
    if (w.size() != a.numel()) throw std::invalid_argument("weighted_sum: weight count mismatch");
    T total = 0;
    for (std::size_t i = 0; i < w.size(); ++i) total += a[i] * w[i];
    return make_result<T>({1}, {total}, {a}, [w = std::move(w)](Node<T>& self) {
        auto* g = detail::grad_of(*self.parents[0]);
        for (std::size_t i = 0; i < w.size(); ++i) (*g)[i] += self.grad[0] * w[i];
    });
}

}  // namespace mdup
