#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "dbrn/autodiff/ops.hpp"

namespace dbrn {

namespace detail {

// col layout: (Ho*Wo) rows x (Cin*kh*kw) cols, zero padding.
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t Ho, int64_t Wo, T* col) {
    const int64_t K = C * kh * kw;
    for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
            T* row = col + (oy * Wo + ox) * K;
            int64_t k = 0;
            for (int64_t c = 0; c < C; ++c) {
                const T* xc = x + c * H * W;
                for (int64_t dy = 0; dy < kh; ++dy) {
                    const int64_t iy = oy * stride + dy - pad;
                    for (int64_t dx = 0; dx < kw; ++dx, ++k) {
                        const int64_t ix = ox * stride + dx - pad;
                        row[k] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? xc[iy * W + ix] : T(0);
                    }
                }
            }
        }
}

template <typename T>
void col2im_acc(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* gx) {
    const int64_t K = C * kh * kw;
    for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
            const T* row = col + (oy * Wo + ox) * K;
            int64_t k = 0;
            for (int64_t c = 0; c < C; ++c) {
                T* xc = gx + c * H * W;
                for (int64_t dy = 0; dy < kh; ++dy) {
                    const int64_t iy = oy * stride + dy - pad;
                    for (int64_t dx = 0; dx < kw; ++dx, ++k) {
                        const int64_t ix = ox * stride + dx - pad;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W) xc[iy * W + ix] += row[k];
                    }
                }
            }
        }
}

} // namespace detail

// conv2d on NCHW input; w (Cout, Cin, kh, kw), optional bias (Cout).
// im2col is recomputed in backward rather than captured, trading ~10% time
// for a much smaller live graph.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int64_t stride, int64_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4) throw parameter_error("conv2d: need NCHW x and OIHW w");
    if (xs[1] != ws[1]) throw parameter_error("conv2d: channel mismatch");
    const int64_t N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int64_t Cout = ws[0], kh = ws[2], kw = ws[3];
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw parameter_error("conv2d: kernel larger than padded input");
    const int64_t K = Cin * kh * kw;

    Tensor<T> out({N, Cout, Ho, Wo});
    std::vector<T> col(static_cast<size_t>(Ho * Wo * K));
    for (int64_t n = 0; n < N; ++n) {
        detail::im2col(x.val().data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                       col.data());
        // (Cout, HoWo) = w(Cout,K) * col^T
        gemm_nt(w.val().data(), col.data(), out.data() + n * Cout * Ho * Wo, Cout, K, Ho * Wo);
    }
    if (b.defined()) {
        if (b.numel() != Cout) throw parameter_error("conv2d: bias size");
        T* po = out.data();
        const T* pb = b.val().data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < Cout; ++c) {
                T* row = po + (n * Cout + c) * Ho * Wo;
                for (int64_t i = 0; i < Ho * Wo; ++i) row[i] += pb[c];
            }
    }
    return make_op<T>(std::move(out), {x, w, b},
                      [x, w, b, N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K](Node<T>& n) {
        const T* g = n.grad.data();
        std::vector<T> col(static_cast<size_t>(Ho * Wo * K));
        std::vector<T> dcol(static_cast<size_t>(Ho * Wo * K));
        for (int64_t nn = 0; nn < N; ++nn) {
            const T* gn = g + nn * Cout * Ho * Wo;
            if (w.requires_grad() || x.requires_grad()) {
                if (w.requires_grad()) {
                    detail::im2col(x.val().data() + nn * Cin * H * W, Cin, H, W, kh, kw, stride,
                                   pad, Ho, Wo, col.data());
                    // dW(Cout,K) += g(Cout,HoWo) * col(HoWo,K)
                    gemm_nn(gn, col.data(), w.grad().data(), Cout, Ho * Wo, K, true);
                }
                if (x.requires_grad()) {
                    // dcol(HoWo,K) = g^T(HoWo,Cout) * w(Cout,K)
                    gemm_tn(gn, w.val().data(), dcol.data(), Ho * Wo, Cout, K);
                    detail::col2im_acc(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                       x.grad().data() + nn * Cin * H * W);
                }
            }
            if (b.defined() && b.requires_grad()) {
                T* gb = b.grad().data();
                for (int64_t c = 0; c < Cout; ++c) {
                    const T* row = gn + c * Ho * Wo;
                    T acc = T(0);
                    for (int64_t i = 0; i < Ho * Wo; ++i) acc += row[i];
                    gb[c] += acc;
                }
            }
        }
    });
}

// Bilinear upsampling, half-pixel convention (align_corners=false).
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int64_t Ho, int64_t Wo) {
    const auto& s = x.shape();
    if (s.size() != 4) throw parameter_error("upsample_bilinear: need NCHW");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    if (Ho == H && Wo == W) return x;

    struct Tap {
        int64_t i0, i1;
        T w0, w1;
    };
    auto make_taps = [](int64_t in, int64_t out) {
        std::vector<Tap> taps(static_cast<size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (int64_t o = 0; o < out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            if (src > in - 1) src = static_cast<double>(in - 1);
            const int64_t i0 = static_cast<int64_t>(std::floor(src));
            const int64_t i1 = std::min(i0 + 1, in - 1);
            const T w1 = static_cast<T>(src - static_cast<double>(i0));
            taps[static_cast<size_t>(o)] = {i0, i1, T(1) - w1, w1};
        }
        return taps;
    };
    auto ty = std::make_shared<std::vector<Tap>>(make_taps(H, Ho));
    auto tx = std::make_shared<std::vector<Tap>>(make_taps(W, Wo));

    Tensor<T> out({N, C, Ho, Wo});
    const T* px = x.val().data();
    T* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xi = px + nc * H * W;
        T* oi = po + nc * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
            const Tap& a = (*ty)[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < Wo; ++ox) {
                const Tap& b2 = (*tx)[static_cast<size_t>(ox)];
                oi[oy * Wo + ox] = a.w0 * (b2.w0 * xi[a.i0 * W + b2.i0] + b2.w1 * xi[a.i0 * W + b2.i1]) +
                                   a.w1 * (b2.w0 * xi[a.i1 * W + b2.i0] + b2.w1 * xi[a.i1 * W + b2.i1]);
            }
        }
    }
    return make_op<T>(std::move(out), {x}, [x, ty, tx, N, C, H, W, Ho, Wo](Node<T>& n) {
        if (!x.requires_grad()) return;
        const T* g = n.grad.data();
        T* gx = x.grad().data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            T* gi = gx + nc * H * W;
            const T* go = g + nc * Ho * Wo;
            for (int64_t oy = 0; oy < Ho; ++oy) {
                const auto& a = (*ty)[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    const auto& b2 = (*tx)[static_cast<size_t>(ox)];
                    const T gv = go[oy * Wo + ox];
                    gi[a.i0 * W + b2.i0] += a.w0 * b2.w0 * gv;
                    gi[a.i0 * W + b2.i1] += a.w0 * b2.w1 * gv;
                    gi[a.i1 * W + b2.i0] += a.w1 * b2.w0 * gv;
                    gi[a.i1 * W + b2.i1] += a.w1 * b2.w1 * gv;
                }
            }
        }
    });
}

// Exact mean pooling by an integer factor.
template <typename T>
Var<T> downsample_area(const Var<T>& x, int64_t factor) {
    const auto& s = x.shape();
    if (s.size() != 4) throw parameter_error("downsample_area: need NCHW");
    if (factor == 1) return x;
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    if (H % factor || W % factor) throw parameter_error("downsample_area: factor must divide H,W");
    const int64_t Ho = H / factor, Wo = W / factor;
    const T inv = T(1) / static_cast<T>(factor * factor);
    Tensor<T> out({N, C, Ho, Wo});
    const T* px = x.val().data();
    T* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xi = px + nc * H * W;
        T* oi = po + nc * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T acc = T(0);
                for (int64_t dy = 0; dy < factor; ++dy)
                    for (int64_t dx = 0; dx < factor; ++dx)
                        acc += xi[(oy * factor + dy) * W + ox * factor + dx];
                oi[oy * Wo + ox] = acc * inv;
            }
    }
    return make_op<T>(std::move(out), {x}, [x, factor, N, C, H, W, Ho, Wo, inv](Node<T>& n) {
        if (!x.requires_grad()) return;
        const T* g = n.grad.data();
        T* gx = x.grad().data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            T* gi = gx + nc * H * W;
            const T* go = g + nc * Ho * Wo;
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    const T gv = go[oy * Wo + ox] * inv;
                    for (int64_t dy = 0; dy < factor; ++dy)
                        for (int64_t dx = 0; dx < factor; ++dx)
                            gi[(oy * factor + dy) * W + ox * factor + dx] += gv;
                }
        }
    });
}

// Separable blur with a fixed 1-D kernel, valid padding (output shrinks by
// len-1 per axis). Used by the SSIM window.
template <typename T>
Var<T> separable_blur_valid(const Var<T>& x, std::shared_ptr<const std::vector<T>> kernel) {
    const auto& s = x.shape();
    if (s.size() != 4) throw parameter_error("separable_blur_valid: need NCHW");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    const int64_t K = static_cast<int64_t>(kernel->size());
    if (H < K || W < K) throw parameter_error("separable_blur_valid: image smaller than window");
    const int64_t Ho = H - K + 1, Wo = W - K + 1;
    const auto& k = *kernel;

    Tensor<T> out({N, C, Ho, Wo});
    std::vector<T> tmp(static_cast<size_t>(H * Wo));
    const T* px = x.val().data();
    T* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xi = px + nc * H * W;
        for (int64_t y = 0; y < H; ++y)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T acc = T(0);
                for (int64_t t = 0; t < K; ++t) acc += xi[y * W + ox + t] * k[static_cast<size_t>(t)];
                tmp[static_cast<size_t>(y * Wo + ox)] = acc;
            }
        T* oi = po + nc * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T acc = T(0);
                for (int64_t t = 0; t < K; ++t)
                    acc += tmp[static_cast<size_t>((oy + t) * Wo + ox)] * k[static_cast<size_t>(t)];
                oi[oy * Wo + ox] = acc;
            }
    }
    return make_op<T>(std::move(out), {x}, [x, kernel, N, C, H, W, Ho, Wo, K](Node<T>& n) {
        if (!x.requires_grad()) return;
        const auto& k = *kernel;
        const T* g = n.grad.data();
        T* gx = x.grad().data();
        std::vector<T> tmp(static_cast<size_t>(H * Wo));
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* go = g + nc * Ho * Wo;
            std::fill(tmp.begin(), tmp.end(), T(0));
            // transpose of the vertical pass
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    const T gv = go[oy * Wo + ox];
                    for (int64_t t = 0; t < K; ++t)
                        tmp[static_cast<size_t>((oy + t) * Wo + ox)] += gv * k[static_cast<size_t>(t)];
                }
            // transpose of the horizontal pass
            T* gi = gx + nc * H * W;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    const T tv = tmp[static_cast<size_t>(y * Wo + ox)];
                    for (int64_t t = 0; t < K; ++t) gi[y * W + ox + t] += tv * k[static_cast<size_t>(t)];
                }
        }
    });
}

} // namespace dbrn
