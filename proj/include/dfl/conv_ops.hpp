#pragma once

#include <omp.h>

#include "dfl/common.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Dense convolution primitives. All loops partition their output exclusively
// across OpenMP threads, so results are bitwise reproducible for any thread
// count.
// ---------------------------------------------------------------------------

/// Fold an index into [0, n) by mirror reflection (edge pixels duplicated).
/// Valid for any overshoot, so kernels may be larger than the image.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return (i < n) ? i : period - 1 - i;
}

/// Pad every channel by `r` pixels of mirror reflection on each side.
inline Tensor reflect_pad(const Tensor& x, int r) {
    Tensor out(1, x.c, x.h + 2 * r, x.w + 2 * r);
    for (int c = 0; c < x.c; ++c)
        for (int y = 0; y < out.h; ++y) {
            const double* src = x.row(c, reflect_index(y - r, x.h));
            double* dst = out.row(c, y);
            for (int xx = 0; xx < out.w; ++xx) dst[xx] = src[reflect_index(xx - r, x.w)];
        }
    return out;
}

/// True 2D convolution of an image with one square kernel, applied to every
/// channel, mirror padding, same-size output.
inline Tensor convolve_image(const Tensor& img, const Tensor& kernel) {
    const int k = kernel.w;
    if (kernel.h != k || k % 2 == 0)
        throw ShapeError(strf("convolve_image: kernel must be square and odd, got %dx%d",
                              kernel.h, kernel.w));
    const int r = k / 2;
    if (k == 1) {
        Tensor out = img;
        if (kernel.v[0] != 1.0) out *= kernel.v[0];
        return out;
    }
    // Convolution == valid correlation of the padded image with the
    // flipped kernel.
    Tensor kf = Tensor::grid(k, k);
    for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v) kf.at(u, v) = kernel.at(k - 1 - u, k - 1 - v);

    const Tensor pad = reflect_pad(img, r);
    Tensor out(1, img.c, img.h, img.w);
#pragma omp parallel for schedule(static) collapse(2)
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < img.h; ++y) {
            double* orow = out.row(c, y);
            for (int u = 0; u < k; ++u) {
                const double* prow = pad.row(c, y + u);
                for (int v = 0; v < k; ++v) {
                    const double w = kf.at(u, v);
                    if (w == 0.0) continue;
                    const double* p = prow + v;
                    for (int x = 0; x < img.w; ++x) orow[x] += w * p[x];
                }
            }
        }
    return out;
}

/// Gradient of sum(gout ⊙ convolve_image(img, kernel)) w.r.t. the kernel.
/// `pad` must be reflect_pad(img, r) for the kernel radius r.
inline Tensor convolve_kernel_grad(const Tensor& pad, const Tensor& gout, int r) {
    const int k = 2 * r + 1;
    Tensor gk = Tensor::grid(k, k);
#pragma omp parallel for schedule(static) collapse(2)
    for (int u = 0; u < k; ++u)
        for (int v = 0; v < k; ++v) {
            // d out(y,x) / d kernel(u,v) = pad[y + 2r - u][x + 2r - v]
            double acc = 0.0;
            for (int c = 0; c < gout.c; ++c)
                for (int y = 0; y < gout.h; ++y) {
                    const double* g = gout.row(c, y);
                    const double* p = pad.row(c, y + 2 * r - u) + (2 * r - v);
                    for (int x = 0; x < gout.w; ++x) acc += g[x] * p[x];
                }
            gk.at(u, v) = acc;
        }
    return gk;
}

// ---------------------------------------------------------------------------
// Neural-net convolution (cross-correlation), zero padding, square kernels.
// x: (1, IC, H, W); W: (OC, IC, K, K); b: length OC (may be empty).
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline Tensor conv2d_fwd(const Tensor& x, const Tensor& W, const std::vector<double>& b,
                         int stride, int pad) {
    if (x.c != W.c)
        throw ShapeError(strf("conv2d: input channels %d != weight in-channels %d", x.c, W.c));
    const int k = W.w, oc = W.n, oh = conv_out_dim(x.h, k, stride, pad),
              ow = conv_out_dim(x.w, k, stride, pad);
    if (oh <= 0 || ow <= 0)
        throw ShapeError(strf("conv2d: output would be empty for input %dx%d", x.h, x.w));
    Tensor y(1, oc, oh, ow);
#pragma omp parallel for schedule(static)
    for (int o = 0; o < oc; ++o) {
        if (!b.empty())
            for (int i = 0; i < oh * ow; ++i) y.v[static_cast<size_t>(o) * oh * ow + i] = b[o];
        for (int ic = 0; ic < x.c; ++ic)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = W.at(o, ic, ky, kx);
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= x.h) continue;
                        const double* xr = x.row(ic, iy);
                        double* yr = y.row(o, oy);
                        int ox0 = 0, ox1 = ow;
                        // ix = ox*stride + kx - pad must stay in [0, W)
                        while (ox0 < ow && ox0 * stride + kx - pad < 0) ++ox0;
                        while (ox1 > ox0 && (ox1 - 1) * stride + kx - pad >= x.w) --ox1;
                        if (stride == 1) {
                            const double* xp = xr + kx - pad;
                            for (int ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xp[ox];
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox)
                                yr[ox] += wv * xr[ox * stride + kx - pad];
                        }
                    }
                }
    }
    return y;
}

/// Gradient w.r.t. the conv input.
inline Tensor conv2d_dgrad(const Tensor& gy, const Tensor& W, int stride, int pad, int in_h,
                           int in_w) {
    const int k = W.w, oc = W.n, ic_n = W.c;
    Tensor gx(1, ic_n, in_h, in_w);
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < ic_n; ++ic)
        for (int o = 0; o < oc; ++o)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = W.at(o, ic, ky, kx);
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < gy.h; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= in_h) continue;
                        const double* gr = gy.row(o, oy);
                        double* gxr = gx.row(ic, iy);
                        for (int ox = 0; ox < gy.w; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= in_w) continue;
                            gxr[ix] += wv * gr[ox];
                        }
                    }
                }
    return gx;
}

/// Accumulates weight/bias gradients.
inline void conv2d_wgrad(const Tensor& x, const Tensor& gy, int stride, int pad, Tensor& gW,
                         std::vector<double>& gb) {
    const int k = gW.w, oc = gW.n;
#pragma omp parallel for schedule(static)
    for (int o = 0; o < oc; ++o) {
        if (!gb.empty()) {
            double s = 0.0;
            for (int oy = 0; oy < gy.h; ++oy) {
                const double* gr = gy.row(o, oy);
                for (int ox = 0; ox < gy.w; ++ox) s += gr[ox];
            }
            gb[o] += s;
        }
        for (int ic = 0; ic < x.c; ++ic)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < gy.h; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= x.h) continue;
                        const double* gr = gy.row(o, oy);
                        const double* xr = x.row(ic, iy);
                        for (int ox = 0; ox < gy.w; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= x.w) continue;
                            acc += gr[ox] * xr[ix];
                        }
                    }
                    gW.at(o, ic, ky, kx) += acc;
                }
    }
}

// ---------------------------------------------------------------------------
// Resampling.
// ---------------------------------------------------------------------------

/// Exact area-weighted average resize of every channel to (oh, ow). For
/// integer downscale factors this is plain average pooling; for arbitrary
/// shapes each output cell integrates its fractional source rectangle.
inline Tensor area_resize(const Tensor& x, int oh, int ow) {
    if (oh <= 0 || ow <= 0) throw ShapeError("area_resize: non-positive output shape");
    if (oh == x.h && ow == x.w) return x;
    Tensor out(1, x.c, oh, ow);
    const double sy = static_cast<double>(x.h) / oh, sx = static_cast<double>(x.w) / ow;
    for (int c = 0; c < x.c; ++c)
        for (int oy = 0; oy < oh; ++oy) {
            const double y0 = oy * sy, y1 = (oy + 1) * sy;
            const int iy0 = static_cast<int>(y0), iy1 = std::min(x.h - 1, static_cast<int>(std::ceil(y1)) - 1);
            for (int ox = 0; ox < ow; ++ox) {
                const double x0 = ox * sx, x1 = (ox + 1) * sx;
                const int ix0 = static_cast<int>(x0),
                          ix1 = std::min(x.w - 1, static_cast<int>(std::ceil(x1)) - 1);
                double acc = 0.0;
                for (int iy = iy0; iy <= iy1; ++iy) {
                    const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                    const double* r = x.row(c, iy);
                    for (int ix = ix0; ix <= ix1; ++ix) {
                        const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                        acc += wy * wx * r[ix];
                    }
                }
                out.at(c, oy, ox) = acc / (sy * sx);
            }
        }
    return out;
}

/// Average pooling by an integer factor (shape must divide evenly).
inline Tensor avg_pool(const Tensor& x, int f) {
    if (x.h % f || x.w % f)
        throw ShapeError(strf("avg_pool: %dx%d not divisible by %d", x.h, x.w, f));
    return area_resize(x, x.h / f, x.w / f);
}

/// Backward of avg_pool: spread the gradient uniformly over each cell.
inline Tensor avg_pool_backward(const Tensor& gy, int f, int in_h, int in_w) {
    Tensor gx(1, gy.c, in_h, in_w);
    const double inv = 1.0 / (f * f);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < gy.c; ++c)
        for (int oy = 0; oy < gy.h; ++oy)
            for (int ox = 0; ox < gy.w; ++ox) {
                const double g = gy.at(c, oy, ox) * inv;
                for (int dy = 0; dy < f; ++dy) {
                    double* r = gx.row(c, oy * f + dy);
                    for (int dx = 0; dx < f; ++dx) r[ox * f + dx] += g;
                }
            }
    return gx;
}

struct BilinearTap {
    int i0, i1;
    double w0, w1;
};

inline BilinearTap bilinear_tap(int o, int f, int in_n) {
    const double src = (o + 0.5) / f - 0.5;
    double fl = std::floor(src);
    int i0 = static_cast<int>(fl);
    double t = src - fl;
    int i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 > in_n - 1) i1 = in_n - 1;
    if (i0 > in_n - 1) i0 = in_n - 1;
    return {i0, i1, 1.0 - t, t};
}

/// Bilinear upsample by an integer factor (half-pixel centers, edges clamped).
inline Tensor bilinear_upsample(const Tensor& x, int f) {
    const int oh = x.h * f, ow = x.w * f;
    Tensor out(1, x.c, oh, ow);
    std::vector<BilinearTap> tx(ow);
    for (int ox = 0; ox < ow; ++ox) tx[ox] = bilinear_tap(ox, f, x.w);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < x.c; ++c)
        for (int oy = 0; oy < oh; ++oy) {
            const BilinearTap ty = bilinear_tap(oy, f, x.h);
            const double* r0 = x.row(c, ty.i0);
            const double* r1 = x.row(c, ty.i1);
            double* o = out.row(c, oy);
            for (int ox = 0; ox < ow; ++ox) {
                const BilinearTap& t = tx[ox];
                o[ox] = ty.w0 * (t.w0 * r0[t.i0] + t.w1 * r0[t.i1]) +
                        ty.w1 * (t.w0 * r1[t.i0] + t.w1 * r1[t.i1]);
            }
        }
    return out;
}

inline Tensor bilinear_upsample_backward(const Tensor& gy, int f, int in_h, int in_w) {
    Tensor gx(1, gy.c, in_h, in_w);
    std::vector<BilinearTap> tx(gy.w);
    for (int ox = 0; ox < gy.w; ++ox) tx[ox] = bilinear_tap(ox, f, in_w);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < gy.c; ++c)
        for (int oy = 0; oy < gy.h; ++oy) {
            const BilinearTap ty = bilinear_tap(oy, f, in_h);
            const double* g = gy.row(c, oy);
            double* r0 = gx.row(c, ty.i0);
            double* r1 = gx.row(c, ty.i1);
            for (int ox = 0; ox < gy.w; ++ox) {
                const BilinearTap& t = tx[ox];
                r0[t.i0] += ty.w0 * t.w0 * g[ox];
                r0[t.i1] += ty.w0 * t.w1 * g[ox];
                r1[t.i0] += ty.w1 * t.w0 * g[ox];
                r1[t.i1] += ty.w1 * t.w1 * g[ox];
            }
        }
    return gx;
}

/// Summed-area table with a zero top row/left column: sums are
/// sat(y1+1,x1+1) - sat(y0,x1+1) - sat(y1+1,x0) + sat(y0,x0).
inline Tensor integral_image(const Tensor& x, int channel = 0) {
    Tensor sat = Tensor::grid(x.h + 1, x.w + 1);
    for (int y = 0; y < x.h; ++y) {
        const double* r = x.row(channel, y);
        double rowsum = 0.0;
        for (int xx = 0; xx < x.w; ++xx) {
            rowsum += r[xx];
            sat.at(y + 1, xx + 1) = sat.at(y, xx + 1) + rowsum;
        }
    }
    return sat;
}

inline double box_sum(const Tensor& sat, int y0, int x0, int y1, int x1) {
    return sat.at(y1 + 1, x1 + 1) - sat.at(y0, x1 + 1) - sat.at(y1 + 1, x0) + sat.at(y0, x0);
}

}  // namespace dfl
