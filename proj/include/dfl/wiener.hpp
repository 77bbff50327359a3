#pragma once

#include <fftw3.h>

#include "dfl/reblur.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Non-blind Wiener deconvolution and the two-stage (defocus map + per-class
// deconvolution) pipeline. The blurred input is mirror-padded before the
// FFT so the periodic model's wraparound never reaches the interior.
// ---------------------------------------------------------------------------

struct WienerConfig {
    double nsr = 1e-2;               ///< noise-to-signal regularization
    std::string boundary = "reflect";

    void validate() const {
        if (nsr < 0.0) throw ConfigError("wiener: nsr must be >= 0");
        if (boundary != "reflect" && boundary != "wrap")
            throw ConfigError("wiener: boundary must be reflect or wrap");
    }
};

namespace detail {

/// X_hat = conj(K) Y / (|K|^2 + nsr) on one padded channel plane.
inline void wiener_plane(const Tensor& plane, const Tensor& kernel, double nsr, Tensor& out) {
    const int h = plane.h, w = plane.w;
    const int spec_w = w / 2 + 1;
    double* buf = fftw_alloc_real(static_cast<size_t>(h) * w);
    fftw_complex* img_f = fftw_alloc_complex(static_cast<size_t>(h) * spec_w);
    fftw_complex* ker_f = fftw_alloc_complex(static_cast<size_t>(h) * spec_w);

    fftw_plan fwd = fftw_plan_dft_r2c_2d(h, w, buf, img_f, FFTW_ESTIMATE);
    fftw_plan inv = fftw_plan_dft_c2r_2d(h, w, img_f, buf, FFTW_ESTIMATE);

    // Kernel centered at the origin (wrapped corners) so deconvolution does
    // not shift the image.
    const int r = kernel.w / 2;
    for (int i = 0; i < h * w; ++i) buf[i] = 0.0;
    for (int ky = 0; ky < kernel.h; ++ky)
        for (int kx = 0; kx < kernel.w; ++kx) {
            const int py = ((ky - r) % h + h) % h;
            const int px = ((kx - r) % w + w) % w;
            buf[static_cast<size_t>(py) * w + px] = kernel.at(ky, kx);
        }
    fftw_execute_dft_r2c(fwd, buf, ker_f);

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) buf[static_cast<size_t>(y) * w + x] = plane.at(y, x);
    fftw_execute_dft_r2c(fwd, buf, img_f);

    const double scale = 1.0 / (static_cast<double>(h) * w);
    for (size_t i = 0; i < static_cast<size_t>(h) * spec_w; ++i) {
        const double kr = ker_f[i][0], ki = ker_f[i][1];
        const double denom = kr * kr + ki * ki + nsr;
        const double yr = img_f[i][0], yi = img_f[i][1];
        // conj(K) * Y / denom
        img_f[i][0] = (kr * yr + ki * yi) / denom * scale;
        img_f[i][1] = (kr * yi - ki * yr) / denom * scale;
    }
    fftw_execute_dft_c2r(inv, img_f, buf);

    out = Tensor::grid(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(y, x) = buf[static_cast<size_t>(y) * w + x];

    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
    fftw_free(buf);
    fftw_free(img_f);
    fftw_free(ker_f);
}

}  // namespace detail

inline Image wiener_deconv(const Image& image, const Tensor& kernel, const WienerConfig& cfg) {
    cfg.validate();
    if (kernel.h != kernel.w || kernel.w % 2 == 0)
        throw ShapeError("wiener: kernel must be square with odd side");
    if (kernel.w > image.w || kernel.h > image.h)
        throw RangeError(strf("wiener: kernel %dx%d larger than image %dx%d", kernel.h, kernel.w,
                              image.h, image.w));
    if (std::abs(kernel.sum() - 1.0) > 1e-6)
        throw ConfigError(strf("wiener: kernel must sum to 1, got %.9f", kernel.sum()));
    if (kernel.w == 1) {
        // Delta kernel: the filter reduces to a global gain 1/(1 + nsr).
        Image out = image;
        const double g = 1.0 / (1.0 + cfg.nsr);
        if (cfg.nsr != 0.0)
            for (double& v : out.v) v *= g;
        return out;
    }
    // Mirror-doubling makes the field exactly periodic, and a symmetric
    // blur commutes with the mirroring, so the circular model on the 2Hx2W
    // domain matches mirror-padded spatial blur without any seam mismatch.
    const bool mirror = cfg.boundary == "reflect";
    const int ph = mirror ? 2 * image.h : image.h;
    const int pw = mirror ? 2 * image.w : image.w;
    Image out(1, image.c, image.h, image.w);
    for (int c = 0; c < image.c; ++c) {
        Tensor plane = Tensor::grid(ph, pw);
        for (int y = 0; y < ph; ++y) {
            const int sy = y < image.h ? y : 2 * image.h - 1 - y;
            const double* src = image.row(c, sy);
            double* dst = plane.row(0, y);
            for (int x = 0; x < pw; ++x) dst[x] = src[x < image.w ? x : 2 * image.w - 1 - x];
        }
        Tensor deconv;
        detail::wiener_plane(plane, kernel, cfg.nsr, deconv);
        for (int y = 0; y < image.h; ++y)
            for (int x = 0; x < image.w; ++x) out.at(c, y, x) = deconv.at(y, x);
    }
    return out;
}

/// Classical two-stage restoration: quantize the defocus map, deconvolve the
/// full image once per occupied radius class, composite under the binary
/// masks. Class 0 passes through untouched.
inline Image two_stage_deblur(const Image& oof, const DefocusMap& map, const KernelBank& bank,
                              const WienerConfig& cfg) {
    detail::check_reblur_inputs(oof, map, bank);
    cfg.validate();
    std::vector<int> cls(static_cast<size_t>(map.values.h) * map.values.w);
    std::vector<char> occupied(bank.c_max + 1, 0);
    for (size_t i = 0; i < cls.size(); ++i) {
        const int c = std::min(bank.c_max, static_cast<int>(map.values.v[i]));
        cls[i] = c;
        occupied[c] = 1;
    }
    Image out(1, oof.c, oof.h, oof.w);
    for (int c = 0; c <= bank.c_max; ++c) {
        if (!occupied[c]) continue;
        const Image restored = c == 0 ? oof : wiener_deconv(oof, lookup(bank, c), cfg);
        for (int ch = 0; ch < oof.c; ++ch)
            for (int y = 0; y < oof.h; ++y) {
                const double* s = restored.row(ch, y);
                double* o = out.row(ch, y);
                const int* cr = cls.data() + static_cast<size_t>(y) * oof.w;
                for (int x = 0; x < oof.w; ++x)
                    if (cr[x] == c) o[x] = s[x];
            }
    }
    return out;
}

}  // namespace dfl
