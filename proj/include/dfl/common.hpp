#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfl {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto distinct exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad parameters, malformed config files, invalid CLI usage.
struct ConfigError : Error {
    using Error::Error;
};

/// Raster/tensor dimension disagreements.
struct ShapeError : Error {
    using Error::Error;
};

/// Values outside their documented domain (CoC above c_max, kernel class
/// out of bank range, crop larger than image, ...).
struct RangeError : Error {
    using Error::Error;
};

/// Missing or inconsistent datasets, unreadable or unwritable files.
struct DataError : Error {
    using Error::Error;
};

/// Degenerate kernels, NaN losses, non-finite gradients. Training halts on
/// these rather than continuing with poisoned state.
struct NumericError : Error {
    using Error::Error;
};

/// A requested optional capability (e.g. a pretrained feature extractor)
/// is not available in this build/run. Never silently substituted.
struct CapabilityError : Error {
    using Error::Error;
};

template <typename... Args>
std::string strf(const char* fmt, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), fmt, args...);
    return std::string(buf);
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major (n, c, h, w) grid of doubles. Activations use
// n == 1; convolution weights use (out_ch, in_ch, kh, kw). All numerics in
// this library run in double; file formats quantize to float32 on export.
// ---------------------------------------------------------------------------

struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {}

    static Tensor chw(int c_, int h_, int w_, double fill = 0.0) {
        return Tensor(1, c_, h_, w_, fill);
    }
    static Tensor grid(int h_, int w_, double fill = 0.0) {
        return Tensor(1, 1, h_, w_, fill);
    }
    static Tensor scalar(double x) {
        Tensor t(1, 1, 1, 1);
        t.v[0] = x;
        return t;
    }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    double& at(int ni, int ci, int y, int x) {
        return v[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
    }
    double at(int ni, int ci, int y, int x) const {
        return v[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
    }
    double& at(int ci, int y, int x) { return at(0, ci, y, x); }
    double at(int ci, int y, int x) const { return at(0, ci, y, x); }
    double& at(int y, int x) { return at(0, 0, y, x); }
    double at(int y, int x) const { return at(0, 0, y, x); }

    double* row(int ci, int y) { return v.data() + (static_cast<size_t>(ci) * h + y) * w; }
    const double* row(int ci, int y) const {
        return v.data() + (static_cast<size_t>(ci) * h + y) * w;
    }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const { return strf("(%d,%d,%d,%d)", n, c, h, w); }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }
    void zero() { fill(0.0); }

    double sum() const {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    double mean() const { return v.empty() ? 0.0 : sum() / static_cast<double>(v.size()); }
    double min() const { return *std::min_element(v.begin(), v.end()); }
    double max() const { return *std::max_element(v.begin(), v.end()); }
    bool finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Tensor& operator+=(const Tensor& o) {
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        for (size_t i = 0; i < v.size(); ++i) v[i] -= o.v[i];
        return *this;
    }
    Tensor& operator*=(double s) {
        for (double& x : v) x *= s;
        return *this;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(strf("%s: shape mismatch %s vs %s", what, a.shape_str().c_str(),
                              b.shape_str().c_str()));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

inline double mean_abs_diff(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) s += std::abs(a.v[i] - b.v[i]);
    return a.v.empty() ? 0.0 : s / static_cast<double>(a.v.size());
}

/// An image is a (1, C, H, W) tensor with C in {1, 3} and values nominally
/// in [0, 1]. Clamping happens only at export time, never in loss paths.
using Image = Tensor;

inline Tensor clamp01(Tensor t) {
    for (double& x : t.v) x = std::clamp(x, 0.0, 1.0);
    return t;
}

}  // namespace dfl
