#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "dbrn/autodiff/variable.hpp"
#include "dbrn/core/gemm.hpp"
#include "dbrn/core/rng.hpp"

namespace dbrn {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "add");
    Tensor<T> out = a.val();
    const T* pb = b.val().data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        const T* g = n.grad.data();
        if (a.requires_grad()) {
            T* ga = a.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            T* gb = b.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "sub");
    Tensor<T> out = a.val();
    const T* pb = b.val().data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        const T* g = n.grad.data();
        if (a.requires_grad()) {
            T* ga = a.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            T* gb = b.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "mul");
    Tensor<T> out = a.val();
    const T* pb = b.val().data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        const T* g = n.grad.data();
        if (a.requires_grad()) {
            T* ga = a.grad().data();
            const T* vb = b.val().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += g[i] * vb[i];
        }
        if (b.requires_grad()) {
            T* gb = b.grad().data();
            const T* va = a.val().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "div");
    Tensor<T> out = a.val();
    const T* pb = b.val().data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] /= pb[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        const T* g = n.grad.data();
        const T* va = a.val().data();
        const T* vb = b.val().data();
        if (a.requires_grad()) {
            T* ga = a.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += g[i] / vb[i];
        }
        if (b.requires_grad()) {
            T* gb = b.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
        }
    });
}

// x * w with a fixed tensor (no grad into w).
template <typename T>
Var<T> mul_const(const Var<T>& x, Tensor<T> w) {
    check_same_shape(x.val(), w, "mul_const");
    Tensor<T> out = x.val();
    {
        const T* pw = w.data();
        T* po = out.data();
        for (int64_t i = 0; i < out.numel(); ++i) po[i] *= pw[i];
    }
    auto wp = std::make_shared<Tensor<T>>(std::move(w));
    return make_op<T>(std::move(out), {x}, [x, wp](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        const T* pw = wp->data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i] * pw[i];
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, double c) {
    Tensor<T> out = x.val().map([c](T v) { return static_cast<T>(v * c); });
    return make_op<T>(std::move(out), {x}, [x, c](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += static_cast<T>(g[i] * c);
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, double c) {
    Tensor<T> out = x.val().map([c](T v) { return static_cast<T>(v + c); });
    return make_op<T>(std::move(out), {x}, [x](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
template <typename T, typename Fwd, typename Bwd>
Var<T> pointwise(const Var<T>& x, Fwd f, Bwd dfdx_from_in_out) {
    Tensor<T> out = x.val().map(f);
    auto saved = std::make_shared<Tensor<T>>(out); // many backward rules use the output
    return make_op<T>(std::move(out), {x}, [x, saved, dfdx_from_in_out](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        const T* vi = x.val().data();
        const T* vo = saved->data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i] * dfdx_from_in_out(vi[i], vo[i]);
    });
}
} // namespace detail

template <typename T>
Var<T> exp_(const Var<T>& x) {
    return detail::pointwise(
        x, [](T v) { return std::exp(v); }, [](T, T o) { return o; });
}

template <typename T>
Var<T> log_(const Var<T>& x) {
    return detail::pointwise(
        x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return detail::pointwise(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T o) { return o * (T(1) - o); });
}

template <typename T>
Var<T> tanh_(const Var<T>& x) {
    return detail::pointwise(
        x, [](T v) { return std::tanh(v); }, [](T, T o) { return T(1) - o * o; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return detail::pointwise(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, double slope = 0.01) {
    const T s = static_cast<T>(slope);
    return detail::pointwise(
        x, [s](T v) { return v > T(0) ? v : s * v; },
        [s](T v, T) { return v > T(0) ? T(1) : s; });
}

// exact gelu (erf form)
template <typename T>
Var<T> gelu(const Var<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::pointwise(
        x,
        [](T v) {
            return static_cast<T>(0.5 * static_cast<double>(v) *
                                  (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
        },
        [](T v, T) {
            const double d = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
            return static_cast<T>(cdf + d * pdf);
        });
}

// x^c for x >= 0 with constant exponent; c == 0 yields ones with zero grad.
template <typename T>
Var<T> powc(const Var<T>& x, double c) {
    if (c == 0.0) {
        Tensor<T> out(x.shape(), T(1));
        return make_op<T>(std::move(out), {x}, [](Node<T>&) {});
    }
    return detail::pointwise(
        x, [c](T v) { return static_cast<T>(std::pow(static_cast<double>(v), c)); },
        [c](T v, T) {
            return static_cast<T>(c * std::pow(static_cast<double>(v), c - 1.0));
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    Tensor<T> out({1}, x.val().sum());
    return make_op<T>(std::move(out), {x}, [x](Node<T>& n) {
        if (!x.requires_grad()) return;
        const T g = n.grad[0];
        T* gx = x.grad().data();
        for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// sum(x * w) with constant weights; w is either the same shape as x or
// (N,1,H,W) against x (N,C,H,W), broadcast across channels.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, Tensor<T> w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    bool bcast = false;
    if (ws != xs) {
        if (!(xs.size() == 4 && ws.size() == 4 && ws[0] == xs[0] && ws[1] == 1 &&
              ws[2] == xs[2] && ws[3] == xs[3]))
            throw parameter_error("weighted_sum: weight shape " + shape_str(ws) +
                                  " incompatible with " + shape_str(xs));
        bcast = true;
    }
    T acc = T(0);
    if (!bcast) {
        const T* px = x.val().data();
        const T* pw = w.data();
        for (int64_t i = 0; i < x.numel(); ++i) acc += px[i] * pw[i];
    } else {
        const int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        const T* px = x.val().data();
        const T* pw = w.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T* xr = px + (n * C + c) * HW;
                const T* wr = pw + n * HW;
                for (int64_t i = 0; i < HW; ++i) acc += xr[i] * wr[i];
            }
    }
    auto wp = std::make_shared<Tensor<T>>(std::move(w));
    Tensor<T> out({1}, acc);
    return make_op<T>(std::move(out), {x}, [x, wp, bcast](Node<T>& n) {
        if (!x.requires_grad()) return;
        const T g = n.grad[0];
        T* gx = x.grad().data();
        const T* pw = wp->data();
        if (!bcast) {
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g * pw[i];
        } else {
            const auto& xs = x.shape();
            const int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
            for (int64_t nn = 0; nn < N; ++nn)
                for (int64_t c = 0; c < C; ++c) {
                    T* xr = gx + (nn * C + c) * HW;
                    const T* wr = pw + nn * HW;
                    for (int64_t i = 0; i < HW; ++i) xr[i] += g * wr[i];
                }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// x: (.., K) treated as (rows, K); w: (K, M); b: (M) optional (undefined Var to skip)
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
    const auto& xs = x.shape();
    const int64_t K = xs.back();
    const int64_t rows = x.numel() / K;
    if (w.shape().size() != 2 || w.shape()[0] != K)
        throw parameter_error("linear: weight shape " + shape_str(w.shape()) + " vs K=" +
                              std::to_string(K));
    const int64_t M = w.shape()[1];
    Shape os = xs;
    os.back() = M;
    Tensor<T> out(os);
    gemm_nn(x.val().data(), w.val().data(), out.data(), rows, K, M);
    if (b.defined()) {
        if (b.numel() != M) throw parameter_error("linear: bias size mismatch");
        T* po = out.data();
        const T* pb = b.val().data();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t m = 0; m < M; ++m) po[r * M + m] += pb[m];
    }
    return make_op<T>(std::move(out), {x, w, b}, [x, w, b, rows, K, M](Node<T>& n) {
        const T* g = n.grad.data();
        if (x.requires_grad()) gemm_nt(g, w.val().data(), x.grad().data(), rows, M, K, true);
        if (w.requires_grad()) gemm_tn(x.val().data(), g, w.grad().data(), K, rows, M, true);
        if (b.defined() && b.requires_grad()) {
            T* gb = b.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t m = 0; m < M; ++m) gb[m] += g[r * M + m];
        }
    });
}

// Batched matmul: a (B,M,K), b (B,K,N) -> (B,M,N); transpose flags swap the
// interpretation of the last two dims of the corresponding input.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0])
        throw parameter_error("bmm: need (B,M,K)x(B,K,N), got " + shape_str(as) + " " + shape_str(bs));
    const int64_t B = as[0];
    const int64_t M = ta ? as[2] : as[1];
    const int64_t K = ta ? as[1] : as[2];
    const int64_t Kb = tb ? bs[2] : bs[1];
    const int64_t N = tb ? bs[1] : bs[2];
    if (K != Kb) throw parameter_error("bmm: inner dim mismatch");
    Tensor<T> out({B, M, N});
    const int64_t sa = as[1] * as[2], sb = bs[1] * bs[2], so = M * N;
    for (int64_t i = 0; i < B; ++i) {
        const T* pa = a.val().data() + i * sa;
        const T* pb = b.val().data() + i * sb;
        T* po = out.data() + i * so;
        if (!ta && !tb) gemm_nn(pa, pb, po, M, K, N);
        else if (!ta && tb) gemm_nt(pa, pb, po, M, K, N);
        else if (ta && !tb) gemm_tn(pa, pb, po, M, K, N);
        else throw parameter_error("bmm: ta&&tb unsupported");
    }
    return make_op<T>(std::move(out), {a, b}, [a, b, ta, tb, B, M, K, N, sa, sb, so](Node<T>& n) {
        const T* g = n.grad.data();
        for (int64_t i = 0; i < B; ++i) {
            const T* gi = g + i * so;
            const T* pa = a.val().data() + i * sa;
            const T* pb = b.val().data() + i * sb;
            if (a.requires_grad()) {
                T* ga = a.grad().data() + i * sa;
                if (!ta && !tb) gemm_nt(gi, pb, ga, M, N, K, true);        // dA = G B^T
                else if (!ta && tb) gemm_nn(gi, pb, ga, M, N, K, true);    // dA = G B
                else if (ta && !tb) gemm_nt(pb, gi, ga, K, N, M, true);    // dA^T: (K,M) = B G^T
            }
            if (b.requires_grad()) {
                T* gb = b.grad().data() + i * sb;
                if (!ta && !tb) gemm_tn(pa, gi, gb, K, M, N, true);        // dB = A^T G
                else if (!ta && tb) gemm_tn(gi, pa, gb, N, M, K, true);    // dB: (N,K) = G^T A
                else if (ta && !tb) gemm_nn(pa, gi, gb, K, M, N, true);    // dB = A G
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax / log-softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    const int64_t C = x.shape().back();
    const int64_t rows = x.numel() / C;
    Tensor<T> out = x.val();
    T* p = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = p + r * C;
        T mx = row[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T s = T(0);
        for (int64_t c = 0; c < C; ++c) {
            row[c] = std::exp(row[c] - mx);
            s += row[c];
        }
        const T inv = T(1) / s;
        for (int64_t c = 0; c < C; ++c) row[c] *= inv;
    }
    auto saved = std::make_shared<Tensor<T>>(out);
    return make_op<T>(std::move(out), {x}, [x, saved, rows, C](Node<T>& n) {
        if (!x.requires_grad()) return;
        const T* g = n.grad.data();
        const T* pv = saved->data();
        T* gx = x.grad().data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g + r * C;
            const T* vr = pv + r * C;
            T dot = T(0);
            for (int64_t c = 0; c < C; ++c) dot += gr[c] * vr[c];
            T* gxr = gx + r * C;
            for (int64_t c = 0; c < C; ++c) gxr[c] += vr[c] * (gr[c] - dot);
        }
    });
}

// log-softmax over dim 1 of an NCHW tensor (per-pixel class axis).
template <typename T>
Var<T> log_softmax_nchw(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw parameter_error("log_softmax_nchw: need NCHW");
    const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    Tensor<T> out = x.val();
    T* p = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < HW; ++i) {
            T mx = p[(n * C) * HW + i];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, p[(n * C + c) * HW + i]);
            T sum = T(0);
            for (int64_t c = 0; c < C; ++c) sum += std::exp(p[(n * C + c) * HW + i] - mx);
            const T lse = mx + std::log(sum);
            for (int64_t c = 0; c < C; ++c) p[(n * C + c) * HW + i] -= lse;
        }
    auto saved = std::make_shared<Tensor<T>>(out);
    return make_op<T>(std::move(out), {x}, [x, saved, N, C, HW](Node<T>& n) {
        if (!x.requires_grad()) return;
        const T* g = n.grad.data();
        const T* lp = saved->data();
        T* gx = x.grad().data();
        for (int64_t nn = 0; nn < N; ++nn)
            for (int64_t i = 0; i < HW; ++i) {
                T gsum = T(0);
                for (int64_t c = 0; c < C; ++c) gsum += g[(nn * C + c) * HW + i];
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t k = (nn * C + c) * HW + i;
                    gx[k] += g[k] - std::exp(lp[k]) * gsum;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// LayerNorm over the last dim. gamma/beta shape (C).
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    const int64_t C = x.shape().back();
    const int64_t rows = x.numel() / C;
    if (gamma.numel() != C || beta.numel() != C) throw parameter_error("layernorm: affine size");
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_std({rows});
    const T* px = x.val().data();
    const T* pg = gamma.val().data();
    const T* pb = beta.val().data();
    T* po = out.data();
    T* ph = xhat.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * C;
        T mean = T(0);
        for (int64_t c = 0; c < C; ++c) mean += xr[c];
        mean /= static_cast<T>(C);
        T var = T(0);
        for (int64_t c = 0; c < C; ++c) {
            const T d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(C);
        const T istd = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv_std[r] = istd;
        T* hr = ph + r * C;
        T* orow = po + r * C;
        for (int64_t c = 0; c < C; ++c) {
            hr[c] = (xr[c] - mean) * istd;
            orow[c] = hr[c] * pg[c] + pb[c];
        }
    }
    auto hsave = std::make_shared<Tensor<T>>(std::move(xhat));
    auto isave = std::make_shared<Tensor<T>>(std::move(inv_std));
    return make_op<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, hsave, isave, rows, C](Node<T>& n) {
        const T* g = n.grad.data();
        const T* h = hsave->data();
        const T* pg = gamma.val().data();
        if (gamma.requires_grad()) {
            T* gg = gamma.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < C; ++c) gg[c] += g[r * C + c] * h[r * C + c];
        }
        if (beta.requires_grad()) {
            T* gb = beta.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
        }
        if (x.requires_grad()) {
            T* gx = x.grad().data();
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * C;
                const T* hr = h + r * C;
                T sum_gy = T(0), sum_gyh = T(0);
                for (int64_t c = 0; c < C; ++c) {
                    const T gy = gr[c] * pg[c];
                    sum_gy += gy;
                    sum_gyh += gy * hr[c];
                }
                const T istd = (*isave)[r];
                const T invC = T(1) / static_cast<T>(C);
                for (int64_t c = 0; c < C; ++c) {
                    const T gy = gr[c] * pg[c];
                    gx[r * C + c] += istd * (gy - invC * sum_gy - hr[c] * invC * sum_gyh);
                }
            }
        }
    });
}

// BatchNorm over (N,H,W) per channel of an NCHW tensor. In training mode the
// batch statistics are used and running stats updated in place; in eval mode
// the running stats are used (pure affine, still differentiable wrt x/affine).
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                   double momentum = 0.1, double eps = 1e-5) {
    const auto& s = x.shape();
    if (s.size() != 4) throw parameter_error("batchnorm2d: need NCHW");
    const int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    const int64_t cnt = N * HW;
    if (gamma.numel() != C || beta.numel() != C) throw parameter_error("batchnorm2d: affine size");

    Tensor<T> mean({C}), var({C});
    if (training) {
        const T* px = x.val().data();
        for (int64_t c = 0; c < C; ++c) {
            T m = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* row = px + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) m += row[i];
            }
            m /= static_cast<T>(cnt);
            T v = T(0);
            for (int64_t n = 0; n < N; ++n) {
                const T* row = px + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const T d = row[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(cnt);
            mean[c] = m;
            var[c] = v;
            running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * m);
            // unbiased running variance, matching the usual convention
            const T unbiased = cnt > 1 ? v * static_cast<T>(cnt) / static_cast<T>(cnt - 1) : v;
            running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor<T> out(s);
    Tensor<T> xhat(s);
    Tensor<T> istd({C});
    {
        const T* px = x.val().data();
        const T* pg = gamma.val().data();
        const T* pb = beta.val().data();
        T* po = out.data();
        T* ph = xhat.data();
        for (int64_t c = 0; c < C; ++c) istd[c] = T(1) / std::sqrt(var[c] + static_cast<T>(eps));
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T* xr = px + (n * C + c) * HW;
                T* hr = ph + (n * C + c) * HW;
                T* orow = po + (n * C + c) * HW;
                const T m = mean[c], is = istd[c], gm = pg[c], bt = pb[c];
                for (int64_t i = 0; i < HW; ++i) {
                    hr[i] = (xr[i] - m) * is;
                    orow[i] = hr[i] * gm + bt;
                }
            }
    }
    auto hsave = std::make_shared<Tensor<T>>(std::move(xhat));
    auto isave = std::make_shared<Tensor<T>>(std::move(istd));
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, hsave, isave, N, C, HW, cnt, training](Node<T>& n) {
        const T* g = n.grad.data();
        const T* h = hsave->data();
        if (gamma.requires_grad()) {
            T* gg = gamma.grad().data();
            for (int64_t nn = 0; nn < N; ++nn)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gr = g + (nn * C + c) * HW;
                    const T* hr = h + (nn * C + c) * HW;
                    T acc = T(0);
                    for (int64_t i = 0; i < HW; ++i) acc += gr[i] * hr[i];
                    gg[c] += acc;
                }
        }
        if (beta.requires_grad()) {
            T* gb = beta.grad().data();
            for (int64_t nn = 0; nn < N; ++nn)
                for (int64_t c = 0; c < C; ++c) {
                    const T* gr = g + (nn * C + c) * HW;
                    T acc = T(0);
                    for (int64_t i = 0; i < HW; ++i) acc += gr[i];
                    gb[c] += acc;
                }
        }
        if (x.requires_grad()) {
            T* gx = x.grad().data();
            const T* pg = gamma.val().data();
            for (int64_t c = 0; c < C; ++c) {
                const T is = (*isave)[c];
                const T gm = pg[c];
                if (training) {
                    T sum_g = T(0), sum_gh = T(0);
                    for (int64_t nn = 0; nn < N; ++nn) {
                        const T* gr = g + (nn * C + c) * HW;
                        const T* hr = h + (nn * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) {
                            sum_g += gr[i];
                            sum_gh += gr[i] * hr[i];
                        }
                    }
                    const T invc = T(1) / static_cast<T>(cnt);
                    for (int64_t nn = 0; nn < N; ++nn) {
                        const T* gr = g + (nn * C + c) * HW;
                        const T* hr = h + (nn * C + c) * HW;
                        T* gxr = gx + (nn * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i)
                            gxr[i] += gm * is * (gr[i] - invc * sum_g - hr[i] * invc * sum_gh);
                    }
                } else {
                    for (int64_t nn = 0; nn < N; ++nn) {
                        const T* gr = g + (nn * C + c) * HW;
                        T* gxr = gx + (nn * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) gxr[i] += gm * is * gr[i];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

// Inverted dropout with an explicit rng stream; active whenever called.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw parameter_error("dropout: p must be < 1");
    Tensor<T> mask(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < p ? T(0) : keep_scale;
    return mul_const(x, std::move(mask));
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
    Tensor<T> out = x.val().reshaped(std::move(s));
    return make_op<T>(std::move(out), {x}, [x](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var<T> detach(const Var<T>& x) {
    return Var<T>::constant(x.val());
}

// out[i] = x[idx[i]]. Every permutation/partition in the attention stack is
// expressed through this one op; backward is the scatter-add transpose.
template <typename T>
Var<T> gather_flat(const Var<T>& x, std::shared_ptr<const std::vector<int64_t>> idx, Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<int64_t>(idx->size()))
        throw parameter_error("gather_flat: index count vs out shape");
    Tensor<T> out(out_shape);
    const T* px = x.val().data();
    T* po = out.data();
    const auto& ix = *idx;
    for (size_t i = 0; i < ix.size(); ++i) po[i] = px[ix[i]];
    return make_op<T>(std::move(out), {x}, [x, idx](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        const auto& ix = *idx;
        for (size_t i = 0; i < ix.size(); ++i) gx[ix[i]] += g[i];
    });
}

// Concatenate along dim 1 of NCHW tensors.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw parameter_error("concat_channels: empty");
    const auto& s0 = xs[0].shape();
    if (s0.size() != 4) throw parameter_error("concat_channels: need NCHW");
    const int64_t N = s0[0], H = s0[2], W = s0[3], HW = H * W;
    int64_t Ctot = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        if (s.size() != 4 || s[0] != N || s[2] != H || s[3] != W)
            throw parameter_error("concat_channels: mismatched shapes");
        Ctot += s[1];
    }
    Tensor<T> out({N, Ctot, H, W});
    T* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        int64_t coff = 0;
        for (const auto& x : xs) {
            const int64_t C = x.shape()[1];
            const T* px = x.val().data() + n * C * HW;
            std::copy(px, px + C * HW, po + (n * Ctot + coff) * HW);
            coff += C;
        }
    }
    return make_op<T>(std::move(out), xs, [xs, N, Ctot, HW](Node<T>& n) {
        const T* g = n.grad.data();
        for (int64_t nn = 0; nn < N; ++nn) {
            int64_t coff = 0;
            for (const auto& x : xs) {
                const int64_t C = x.shape()[1];
                if (x.requires_grad()) {
                    T* gx = x.grad().data() + nn * C * HW;
                    const T* gr = g + (nn * Ctot + coff) * HW;
                    for (int64_t i = 0; i < C * HW; ++i) gx[i] += gr[i];
                }
                coff += C;
            }
        }
    });
}

// Slice channels [from, to) of an NCHW tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, int64_t from, int64_t to) {
    const auto& s = x.shape();
    if (s.size() != 4 || from < 0 || to > s[1] || from >= to)
        throw parameter_error("slice_channels: bad range");
    const int64_t N = s[0], C = s[1], HW = s[2] * s[3], Cs = to - from;
    Tensor<T> out({N, Cs, s[2], s[3]});
    for (int64_t n = 0; n < N; ++n)
        std::copy(x.val().data() + (n * C + from) * HW, x.val().data() + (n * C + to) * HW,
                  out.data() + n * Cs * HW);
    return make_op<T>(std::move(out), {x}, [x, from, N, C, HW, Cs](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        for (int64_t nn = 0; nn < N; ++nn) {
            const T* gr = g + nn * Cs * HW;
            T* gxr = gx + (nn * C + from) * HW;
            for (int64_t i = 0; i < Cs * HW; ++i) gxr[i] += gr[i];
        }
    });
}

// Concatenate along the last dim (token feature axis).
template <typename T>
Var<T> concat_lastdim(const Var<T>& a, const Var<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != bs.size()) throw parameter_error("concat_lastdim: rank mismatch");
    for (size_t i = 0; i + 1 < as.size(); ++i)
        if (as[i] != bs[i]) throw parameter_error("concat_lastdim: leading dims mismatch");
    const int64_t Ca = as.back(), Cb = bs.back();
    const int64_t rows = a.numel() / Ca;
    Shape os = as;
    os.back() = Ca + Cb;
    Tensor<T> out(os);
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(a.val().data() + r * Ca, a.val().data() + (r + 1) * Ca, out.data() + r * (Ca + Cb));
        std::copy(b.val().data() + r * Cb, b.val().data() + (r + 1) * Cb,
                  out.data() + r * (Ca + Cb) + Ca);
    }
    return make_op<T>(std::move(out), {a, b}, [a, b, rows, Ca, Cb](Node<T>& n) {
        const T* g = n.grad.data();
        if (a.requires_grad()) {
            T* ga = a.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < Ca; ++c) ga[r * Ca + c] += g[r * (Ca + Cb) + c];
        }
        if (b.requires_grad()) {
            T* gb = b.grad().data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < Cb; ++c) gb[r * Cb + c] += g[r * (Ca + Cb) + Ca + c];
        }
    });
}

// x viewed as `tiles` consecutive blocks of bias.numel(); out = x + tile(bias).
template <typename T>
Var<T> add_tiled(const Var<T>& x, const Var<T>& bias, int64_t tiles) {
    const int64_t B = bias.numel();
    if (x.numel() != tiles * B) throw parameter_error("add_tiled: size mismatch");
    Tensor<T> out = x.val();
    T* po = out.data();
    const T* pb = bias.val().data();
    for (int64_t t = 0; t < tiles; ++t)
        for (int64_t i = 0; i < B; ++i) po[t * B + i] += pb[i];
    return make_op<T>(std::move(out), {x, bias}, [x, bias, tiles, B](Node<T>& n) {
        const T* g = n.grad.data();
        if (x.requires_grad()) {
            T* gx = x.grad().data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i];
        }
        if (bias.requires_grad()) {
            T* gb = bias.grad().data();
            for (int64_t t = 0; t < tiles; ++t)
                for (int64_t i = 0; i < B; ++i) gb[i] += g[t * B + i];
        }
    });
}

// Same tiling as add_tiled but with a fixed tensor (attention masks).
template <typename T>
Var<T> add_tiled_const(const Var<T>& x, Tensor<T> bias, int64_t tiles) {
    const int64_t B = bias.numel();
    if (x.numel() != tiles * B) throw parameter_error("add_tiled_const: size mismatch");
    Tensor<T> out = x.val();
    T* po = out.data();
    const T* pb = bias.data();
    for (int64_t t = 0; t < tiles; ++t)
        for (int64_t i = 0; i < B; ++i) po[t * B + i] += pb[i];
    return make_op<T>(std::move(out), {x}, [x](Node<T>& n) {
        if (!x.requires_grad()) return;
        T* gx = x.grad().data();
        const T* g = n.grad.data();
        for (int64_t i = 0; i < n.grad.numel(); ++i) gx[i] += g[i];
    });
}

} // namespace dbrn
