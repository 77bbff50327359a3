#pragma once

#include <string>
#include <vector>

#include "dfl/checkpoint.hpp"
#include "dfl/common.hpp"
#include "dfl/image_io.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// The circle-of-confusion kernel bank: one normalized blur kernel per integer
// CoC radius class c in {0..c_max}, class 0 being the identity. Kernels are
// initialized from a disc-masked, Gaussian-smoothed Butterworth high-pass
// profile and may then be trained as free weights under projection onto the
// feasible set (nonnegative, sum 1).
// ---------------------------------------------------------------------------

struct ButterworthParams {
    double d0 = 3.0;     ///< cutoff radius, pixels
    int order_n = 3;     ///< filter order
    int kappa = 3;       ///< Gaussian smoothing window size, odd
    double sigma = 1.0;  ///< Gaussian standard deviation, pixels

    void validate() const {
        if (!(d0 > 0.0)) throw ConfigError(strf("butterworth: d0 must be > 0, got %g", d0));
        if (order_n < 1) throw ConfigError(strf("butterworth: order_n must be >= 1, got %d", order_n));
        if (kappa < 1 || kappa % 2 == 0)
            throw ConfigError(strf("butterworth: kappa must be odd and >= 1, got %d", kappa));
        if (!(sigma > 0.0)) throw ConfigError(strf("butterworth: sigma must be > 0, got %g", sigma));
    }
};

/// Raw high-pass profile 1 / (1 + (d0/r)^(2n)); defined as 0 at r = 0 (the
/// continuous limit of the formula).
inline double butterworth_profile(double r, double d0, int order_n) {
    if (r <= 0.0) return 0.0;
    return 1.0 / (1.0 + std::pow(d0 / r, 2.0 * order_n));
}

/// Default per-class initialization: the cutoff scales with the radius class
/// so the annular profile keeps its proportions across kernel sizes.
inline ButterworthParams default_butterworth_params(int c) {
    ButterworthParams p;
    p.d0 = std::max(1.0, static_cast<double>(c));
    return p;
}

namespace detail {
/// Normalized kappa x kappa Gaussian.
inline Tensor gaussian_window(int kappa, double sigma) {
    Tensor g = Tensor::grid(kappa, kappa);
    const int r = kappa / 2;
    double sum = 0.0;
    for (int y = 0; y < kappa; ++y)
        for (int x = 0; x < kappa; ++x) {
            const double dy = y - r, dx = x - r;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            g.at(y, x) = v;
            sum += v;
        }
    for (double& v : g.v) v /= sum;
    return g;
}

/// Same-size convolution with zero boundary, used for the smoothing step so
/// the annulus is not reflected back onto itself.
inline Tensor convolve_zero_pad(const Tensor& grid, const Tensor& kernel) {
    const int r = kernel.w / 2;
    Tensor out = Tensor::grid(grid.h, grid.w);
    for (int y = 0; y < grid.h; ++y)
        for (int x = 0; x < grid.w; ++x) {
            double acc = 0.0;
            for (int u = 0; u < kernel.h; ++u) {
                const int sy = y - (u - r);
                if (sy < 0 || sy >= grid.h) continue;
                for (int v = 0; v < kernel.w; ++v) {
                    const int sx = x - (v - r);
                    if (sx < 0 || sx >= grid.w) continue;
                    acc += kernel.at(u, v) * grid.at(sy, sx);
                }
            }
            out.at(y, x) = acc;
        }
    return out;
}
}  // namespace detail

/// Disc-masked Butterworth grid before smoothing/normalization; exposed for
/// verification against direct formula evaluation.
inline Tensor butterworth_grid(int c, const ButterworthParams& p) {
    p.validate();
    const int side = 2 * c + 1;
    Tensor grid = Tensor::grid(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double dy = y - c, dx = x - c;
            const double r = std::sqrt(dx * dx + dy * dy);
            grid.at(y, x) = (r <= static_cast<double>(c)) ? butterworth_profile(r, p.d0, p.order_n)
                                                          : 0.0;
        }
    return grid;
}

/// Builds the normalized blur kernel for radius class c: Butterworth profile
/// on a (2c+1)^2 grid, disc mask, Gaussian smoothing, clamp, normalize.
/// Class 0 is the 1x1 identity.
inline Tensor build_butterworth_kernel(int c, const ButterworthParams& p) {
    if (c < 0) throw RangeError(strf("radius class must be >= 0, got %d", c));
    p.validate();
    if (c == 0) return Tensor::grid(1, 1, 1.0);

    Tensor grid = butterworth_grid(c, p);
    grid = detail::convolve_zero_pad(grid, detail::gaussian_window(p.kappa, p.sigma));
    double sum = 0.0;
    for (double& v : grid.v) {
        if (v < 0.0) v = 0.0;
        sum += v;
    }
    if (sum <= 0.0)
        throw NumericError(strf("degenerate kernel for class %d: grid is all zero "
                                "(d0=%g, n=%d)", c, p.d0, p.order_n));
    for (double& v : grid.v) v /= sum;
    return grid;
}

struct KernelBank {
    int c_max = 0;
    bool trainable = false;
    std::vector<Tensor> kernels;             // index = radius class, side 2c+1
    std::vector<ButterworthParams> params;   // per-class build parameters

    int radius(int c) const { return c; }

    void validate() const {
        if (static_cast<int>(kernels.size()) != c_max + 1)
            throw ShapeError(strf("bank: expected %d kernels, have %zu", c_max + 1, kernels.size()));
        for (int c = 0; c <= c_max; ++c) {
            const Tensor& k = kernels[c];
            if (k.h != 2 * c + 1 || k.w != 2 * c + 1)
                throw ShapeError(strf("bank: class %d kernel support is %dx%d, want %dx%d", c,
                                      k.h, k.w, 2 * c + 1, 2 * c + 1));
            double sum = 0.0;
            for (double v : k.v) {
                if (v < 0.0)
                    throw NumericError(strf("bank: class %d kernel has negative entries", c));
                sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw NumericError(strf("bank: class %d kernel sums to %.9f", c, sum));
        }
        if (kernels[0].v[0] != 1.0) throw NumericError("bank: class 0 kernel is not the identity");
    }
};

/// Builds the trainable bank with one kernel per class. `schedule` may be
/// empty (defaults per class) or provide exactly c_max + 1 parameter sets.
inline KernelBank init_bank(int c_max, const std::vector<ButterworthParams>& schedule = {}) {
    if (c_max < 1) throw ConfigError(strf("init_bank: c_max must be >= 1, got %d", c_max));
    if (!schedule.empty() && static_cast<int>(schedule.size()) != c_max + 1)
        throw ConfigError(strf("init_bank: schedule has %zu entries, want %d", schedule.size(),
                               c_max + 1));
    KernelBank bank;
    bank.c_max = c_max;
    bank.trainable = true;
    bank.kernels.reserve(c_max + 1);
    bank.params.reserve(c_max + 1);
    for (int c = 0; c <= c_max; ++c) {
        const ButterworthParams p = schedule.empty() ? default_butterworth_params(c) : schedule[c];
        try {
            bank.kernels.push_back(build_butterworth_kernel(c, p));
        } catch (const Error& e) {
            throw ConfigError(strf("init_bank: class %d: %s", c, e.what()));
        }
        bank.params.push_back(p);
    }
    return bank;
}

/// All-delta bank: every class passes the image through unchanged.
inline KernelBank make_identity_bank(int c_max) {
    KernelBank bank;
    bank.c_max = c_max;
    bank.trainable = false;
    for (int c = 0; c <= c_max; ++c) {
        Tensor k = Tensor::grid(2 * c + 1, 2 * c + 1);
        k.at(c, c) = 1.0;
        bank.kernels.push_back(std::move(k));
        bank.params.push_back(default_butterworth_params(c));
    }
    return bank;
}

/// Gaussian bank (sigma = c/2) on the same supports; the mismatched kernel
/// family used as the deconvolution baseline's point of comparison.
inline KernelBank make_gaussian_bank(int c_max) {
    KernelBank bank;
    bank.c_max = c_max;
    bank.trainable = false;
    for (int c = 0; c <= c_max; ++c) {
        Tensor k = Tensor::grid(2 * c + 1, 2 * c + 1);
        if (c == 0) {
            k.at(0, 0) = 1.0;
        } else {
            const double sigma = 0.5 * c;
            double sum = 0.0;
            for (int y = 0; y < k.h; ++y)
                for (int x = 0; x < k.w; ++x) {
                    const double dy = y - c, dx = x - c;
                    const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                    k.at(y, x) = v;
                    sum += v;
                }
            for (double& v : k.v) v /= sum;
        }
        bank.kernels.push_back(std::move(k));
        bank.params.push_back(default_butterworth_params(c));
    }
    return bank;
}

inline const Tensor& lookup(const KernelBank& bank, int c) {
    if (c < 0 || c > bank.c_max)
        throw RangeError(strf("kernel class %d out of range [0, %d]", c, bank.c_max));
    return bank.kernels[c];
}

/// Projects one kernel back onto the feasible set (clamp negatives, divide
/// by the sum). Throws if nothing positive remains. A kernel that is already
/// feasible is left untouched, which makes reprojection idempotent bit for
/// bit.
inline void reproject_kernel(Tensor& k, int c) {
    bool clamped = false;
    double sum = 0.0;
    for (double& v : k.v) {
        if (v < 0.0) {
            v = 0.0;
            clamped = true;
        }
        sum += v;
    }
    if (sum <= 0.0)
        throw NumericError(strf("reprojection failed: class %d kernel is all-nonpositive", c));
    if (!clamped && std::abs(sum - 1.0) <= 1e-12) return;
    for (double& v : k.v) v /= sum;
}

inline void reproject_bank_in_place(KernelBank& bank) {
    // Class 0 stays the identity by definition.
    for (int c = 1; c <= bank.c_max; ++c) reproject_kernel(bank.kernels[c], c);
}

inline KernelBank reproject_bank(const KernelBank& bank) {
    KernelBank out = bank;
    reproject_bank_in_place(out);
    return out;
}

// ---------------------------------------------------------------------------
// Serialization and preview export.
// ---------------------------------------------------------------------------

inline void save_bank(const KernelBank& bank, const std::string& path) {
    Archive a;
    a.meta.set("kind", std::string("kernel_bank"));
    a.meta.set("c_max", bank.c_max);
    a.meta.set("trainable", std::string(bank.trainable ? "true" : "false"));
    Tensor params(bank.c_max + 1, 1, 1, 4);
    for (int c = 0; c <= bank.c_max; ++c) {
        params.at(c, 0, 0, 0) = bank.params[c].d0;
        params.at(c, 0, 0, 1) = bank.params[c].order_n;
        params.at(c, 0, 0, 2) = bank.params[c].kappa;
        params.at(c, 0, 0, 3) = bank.params[c].sigma;
    }
    a.add("params", params);
    for (int c = 0; c <= bank.c_max; ++c) a.add(strf("k%d", c), bank.kernels[c]);
    a.save(path);
}

inline KernelBank load_bank(const std::string& path) {
    const Archive a = Archive::load(path);
    if (a.meta.get_str("kind", "") != "kernel_bank")
        throw DataError(path + ": archive is not a kernel bank");
    KernelBank bank;
    bank.c_max = a.meta.get_int("c_max");
    bank.trainable = a.meta.get_bool("trainable");
    const Tensor& params = a.tensor("params");
    for (int c = 0; c <= bank.c_max; ++c) {
        ButterworthParams p;
        p.d0 = params.at(c, 0, 0, 0);
        p.order_n = static_cast<int>(params.at(c, 0, 0, 1));
        p.kappa = static_cast<int>(params.at(c, 0, 0, 2));
        p.sigma = params.at(c, 0, 0, 3);
        bank.params.push_back(p);
        bank.kernels.push_back(a.tensor(strf("k%d", c)));
    }
    bank.validate();
    return bank;
}

/// Writes one kernel as a max-normalized grayscale preview (for visual
/// comparison against sampled camera PSFs).
inline void export_kernel_png(const KernelBank& bank, int c, const std::string& path) {
    const Tensor& k = lookup(bank, c);
    Tensor img = k;
    const double peak = k.max();
    if (peak > 0.0)
        for (double& v : img.v) v /= peak;
    write_png(path, img, 8);
}

}  // namespace dfl
