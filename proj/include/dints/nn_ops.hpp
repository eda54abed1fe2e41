#pragma once

// Image primitives on NCHW tensors: convolution, instance normalization and
// factor-2 resampling.

#include <algorithm>
#include <cmath>
#include <string>

#include "dints/ops.hpp"

namespace dints::ad {

namespace detail {

inline void require_nchw(const Tensor& x, const char* what)
{
    if (x.rank() != 4) throw ShapeError(std::string(what) + ": expected NCHW tensor, got " + shape_str(x.shape));
}

// Valid output range [lo, hi) for a tap at offset `off` along an axis of length n.
inline void tap_range(int n, int off, int& lo, int& hi)
{
    lo = std::max(0, -off);
    hi = std::min(n, n - off);
}

} // namespace detail

/// Stride-1 "same" convolution. w is [Co, Ci, kh, kw] with odd kernel extents.
inline Var conv2d(Var x, Var w, int dilation = 1)
{
    detail::same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    detail::require_nchw(xv, "conv2d input");
    if (wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) % 2 == 0 || wv.dim(3) % 2 == 0 || dilation < 1)
        throw ShapeError("conv2d: input " + shape_str(xv.shape) + " incompatible with kernel " + shape_str(wv.shape));
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
    const int ph = dilation * (KH - 1) / 2, pw = dilation * (KW - 1) / 2;
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    Tensor out({N, Co, H, W}, 0.0);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            double* op = &out.data[(static_cast<std::size_t>(n) * Co + co) * plane];
            for (int ci = 0; ci < Ci; ++ci) {
                const double* ip = &xv.data[(static_cast<std::size_t>(n) * Ci + ci) * plane];
                for (int ky = 0; ky < KH; ++ky) {
                    const int dy = ky * dilation - ph;
                    int y0, y1;
                    detail::tap_range(H, dy, y0, y1);
                    for (int kx = 0; kx < KW; ++kx) {
                        const int dx = kx * dilation - pw;
                        int x0, x1;
                        detail::tap_range(W, dx, x0, x1);
                        const double wk = wv.at(co, ci, ky, kx);
                        if (wk == 0.0) continue;
                        for (int y = y0; y < y1; ++y) {
                            double* orow = op + static_cast<std::size_t>(y) * W;
                            const double* irow = ip + static_cast<std::size_t>(y + dy) * W + dx;
                            for (int xx = x0; xx < x1; ++xx) orow[xx] += wk * irow[xx];
                        }
                    }
                }
            }
        }

    return x.tape->record(std::move(out), {x, w}, [=](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(w);
        Tensor* gx = t.grad_sink(x);
        Tensor* gw = t.grad_sink(w);
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
                const double* gp = &g.data[(static_cast<std::size_t>(n) * Co + co) * plane];
                for (int ci = 0; ci < Ci; ++ci) {
                    const std::size_t in_off = (static_cast<std::size_t>(n) * Ci + ci) * plane;
                    for (int ky = 0; ky < KH; ++ky) {
                        const int dy = ky * dilation - ph;
                        int y0, y1;
                        detail::tap_range(H, dy, y0, y1);
                        for (int kx = 0; kx < KW; ++kx) {
                            const int dx = kx * dilation - pw;
                            int x0, x1;
                            detail::tap_range(W, dx, x0, x1);
                            if (gx) {
                                const double wk = wv.at(co, ci, ky, kx);
                                if (wk != 0.0)
                                    for (int y = y0; y < y1; ++y) {
                                        const double* grow = gp + static_cast<std::size_t>(y) * W;
                                        double* girow = &gx->data[in_off + static_cast<std::size_t>(y + dy) * W + dx];
                                        for (int xx = x0; xx < x1; ++xx) girow[xx] += wk * grow[xx];
                                    }
                            }
                            if (gw) {
                                double acc = 0.0;
                                for (int y = y0; y < y1; ++y) {
                                    const double* grow = gp + static_cast<std::size_t>(y) * W;
                                    const double* irow = &xv.data[in_off + static_cast<std::size_t>(y + dy) * W + dx];
                                    for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                                }
                                gw->at(co, ci, ky, kx) += acc;
                            }
                        }
                    }
                }
            }
    });
}

/// Adds a per-channel bias b[C] to an NCHW tensor.
inline Var bias_add(Var x, Var b)
{
    detail::same_tape(x, b);
    const Tensor& xv = x.value();
    detail::require_nchw(xv, "bias_add");
    if (b.value().size() != static_cast<std::size_t>(xv.dim(1)))
        throw ShapeError("bias_add: bias " + shape_str(b.shape()) + " vs input " + shape_str(xv.shape));
    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor out = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double bc = b.value().data[static_cast<std::size_t>(c)];
            double* p = &out.data[(static_cast<std::size_t>(n) * C + c) * plane];
            for (std::size_t i = 0; i < plane; ++i) p[i] += bc;
        }
    return x.tape->record(std::move(out), {x, b}, [=](Tape& t, const Tensor&, const Tensor& g) {
        if (Tensor* gx = t.grad_sink(x))
            for (std::size_t i = 0; i < g.size(); ++i) gx->data[i] += g.data[i];
        if (Tensor* gb = t.grad_sink(b))
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* p = &g.data[(static_cast<std::size_t>(n) * C + c) * plane];
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                    gb->data[static_cast<std::size_t>(c)] += acc;
                }
    });
}

/// Per-sample, per-channel normalization with affine scale gamma[C] and shift beta[C].
inline Var instance_norm(Var x, Var gamma, Var beta, double eps = 1e-5)
{
    detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    const Tensor& xv = x.value();
    detail::require_nchw(xv, "instance_norm");
    const int N = xv.dim(0), C = xv.dim(1);
    if (gamma.value().size() != static_cast<std::size_t>(C) || beta.value().size() != static_cast<std::size_t>(C))
        throw ShapeError("instance_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " vs input " + shape_str(xv.shape));
    const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);

    Tensor xhat(xv.shape, 0.0);
    Tensor inv_std({N, C}, 0.0);
    Tensor out(xv.shape, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
            double mu = 0.0;
            for (std::size_t i = 0; i < plane; ++i) mu += xv.data[off + i];
            mu /= static_cast<double>(plane);
            double var = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = xv.data[off + i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(plane);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std.at(n, c) = is;
            const double gc = gamma.value().data[static_cast<std::size_t>(c)];
            const double bc = beta.value().data[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < plane; ++i) {
                const double h = (xv.data[off + i] - mu) * is;
                xhat.data[off + i] = h;
                out.data[off + i] = gc * h + bc;
            }
        }

    return x.tape->record(
        std::move(out), {x, gamma, beta},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor&, const Tensor& g) {
            Tensor* gx = t.grad_sink(x);
            Tensor* gg = t.grad_sink(gamma);
            Tensor* gb = t.grad_sink(beta);
            const auto& gam = t.value(gamma).data;
            const double m = static_cast<double>(plane);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                    double sg = 0.0, sgh = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sg += g.data[off + i];
                        sgh += g.data[off + i] * xhat.data[off + i];
                    }
                    if (gb) gb->data[static_cast<std::size_t>(c)] += sg;
                    if (gg) gg->data[static_cast<std::size_t>(c)] += sgh;
                    if (gx) {
                        const double k = gam[static_cast<std::size_t>(c)] * inv_std.at(n, c) / m;
                        for (std::size_t i = 0; i < plane; ++i)
                            gx->data[off + i] += k * (m * g.data[off + i] - sg - xhat.data[off + i] * sgh);
                    }
                }
        });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2x(Var x)
{
    const Tensor& xv = x.value();
    detail::require_nchw(xv, "upsample2x");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({N, C, 2 * H, 2 * W}, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx) out.at(n, c, y, xx) = xv.at(n, c, y / 2, xx / 2);
    return x.tape->record(std::move(out), {x}, [=](Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx) gx->at(n, c, y / 2, xx / 2) += g.at(n, c, y, xx);
    });
}

/// 2x2 average pooling with stride 2; spatial extents must be even.
inline Var downsample2x(Var x)
{
    const Tensor& xv = x.value();
    detail::require_nchw(xv, "downsample2x");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 || W % 2) throw ShapeError("downsample2x: odd spatial extent in " + shape_str(xv.shape));
    const int h = H / 2, w = W / 2;
    Tensor out({N, C, h, w}, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    out.at(n, c, y, xx) = 0.25 * (xv.at(n, c, 2 * y, 2 * xx) + xv.at(n, c, 2 * y, 2 * xx + 1) +
                                                  xv.at(n, c, 2 * y + 1, 2 * xx) + xv.at(n, c, 2 * y + 1, 2 * xx + 1));
    return x.tape->record(std::move(out), {x}, [=](Tape& t, const Tensor&, const Tensor& g) {
        Tensor* gx = t.grad_sink(x);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const double q = 0.25 * g.at(n, c, y, xx);
                        gx->at(n, c, 2 * y, 2 * xx) += q;
                        gx->at(n, c, 2 * y, 2 * xx + 1) += q;
                        gx->at(n, c, 2 * y + 1, 2 * xx) += q;
                        gx->at(n, c, 2 * y + 1, 2 * xx + 1) += q;
                    }
    });
}

} // namespace dints::ad
