#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dfl/config.hpp"
#include "dfl/conv_ops.hpp"
#include "dfl/image_io.hpp"
#include "dfl/kernel_bank.hpp"
#include "dfl/rng.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// The spatially-varying blur forward model: quantize the defocus map into
// radius classes, blur the full image once per occupied class, and composite
// the per-class results under the binary masks (blur-then-mask). Also the
// dual-pixel view synthesizer and the synthetic scene generator used for
// ground-truth testing.
// ---------------------------------------------------------------------------

struct DefocusMap {
    Tensor values;  // (1,1,H,W), CoC radius in pixels
    double c_max = 25.0;

    void validate() const {
        for (double v : values.v) {
            if (!std::isfinite(v)) throw NumericError("defocus map contains non-finite values");
            if (v < 0.0 || v > c_max)
                throw RangeError(strf("defocus map value %g outside [0, %g]", v, c_max));
        }
    }
    static DefocusMap constant(int h, int w, double value, double c_max) {
        DefocusMap m{Tensor::grid(h, w, value), c_max};
        m.validate();
        return m;
    }
};

struct MaskSet {
    std::vector<Tensor> masks;       // per class, (1,1,H,W) of {0,1}
    std::vector<double> boundaries;  // strictly increasing, first 0
};

/// Radius-class boundaries {0, 1, ..., c_max + 1}: class c covers [c, c+1),
/// so the class index of an in-range value is its floor and the top value
/// c_max still lands in class c_max.
inline std::vector<double> integer_boundaries(int c_max) {
    std::vector<double> b(c_max + 2);
    for (int i = 0; i <= c_max + 1; ++i) b[i] = i;
    return b;
}

inline void validate_boundaries(const std::vector<double>& b, double c_max) {
    if (b.size() < 2) throw ConfigError("quantization boundaries need at least two values");
    if (b.front() != 0.0) throw ConfigError("quantization boundaries must start at 0");
    for (size_t i = 1; i < b.size(); ++i)
        if (!(b[i] > b[i - 1])) throw ConfigError("quantization boundaries must be strictly increasing");
    if (b.back() < c_max)
        throw ConfigError(strf("quantization boundaries end at %g but must cover [0, %g]",
                               b.back(), c_max));
}

/// Class of a value: intervals [b_i, b_{i+1}) with the final interval closed
/// above.
inline int quantize_class(double v, const std::vector<double>& b) {
    const int k = static_cast<int>(b.size()) - 1;
    for (int i = k - 1; i >= 0; --i)
        if (v >= b[i]) return i;
    return 0;
}

inline MaskSet quantize_map(const DefocusMap& map, const std::vector<double>& boundaries) {
    map.validate();
    validate_boundaries(boundaries, map.c_max);
    const int k = static_cast<int>(boundaries.size()) - 1;
    MaskSet ms;
    ms.boundaries = boundaries;
    ms.masks.assign(k, Tensor::grid(map.values.h, map.values.w));
    for (int y = 0; y < map.values.h; ++y)
        for (int x = 0; x < map.values.w; ++x)
            ms.masks[quantize_class(map.values.at(y, x), boundaries)].at(y, x) = 1.0;
    return ms;
}

namespace detail {
inline void check_reblur_inputs(const Image& aif, const DefocusMap& map, const KernelBank& bank) {
    if (aif.h != map.values.h || aif.w != map.values.w)
        throw ShapeError(strf("reblur: image %dx%d vs map %dx%d", aif.h, aif.w, map.values.h,
                              map.values.w));
    map.validate();
    double peak = 0.0;
    for (double v : map.values.v) peak = std::max(peak, v);
    if (peak > static_cast<double>(bank.c_max))
        throw RangeError(strf("map maximum %g exceeds bank c_max %d", peak, bank.c_max));
}
}  // namespace detail

/// Hard (binary-mask) spatially-varying blur.
inline Image reblur(const Image& aif, const DefocusMap& map, const KernelBank& bank) {
    detail::check_reblur_inputs(aif, map, bank);
    std::vector<int> cls(static_cast<size_t>(map.values.h) * map.values.w);
    std::vector<char> occupied(bank.c_max + 1, 0);
    for (size_t i = 0; i < cls.size(); ++i) {
        const int c = std::min(bank.c_max, static_cast<int>(map.values.v[i]));
        cls[i] = c;
        occupied[c] = 1;
    }
    Image out(1, aif.c, aif.h, aif.w);
    for (int c = 0; c <= bank.c_max; ++c) {
        if (!occupied[c]) continue;
        const Image blurred = c == 0 ? aif : convolve_image(aif, lookup(bank, c));
        for (int ch = 0; ch < aif.c; ++ch)
            for (int y = 0; y < aif.h; ++y) {
                const double* b = blurred.row(ch, y);
                double* o = out.row(ch, y);
                const int* cr = cls.data() + static_cast<size_t>(y) * aif.w;
                for (int x = 0; x < aif.w; ++x)
                    if (cr[x] == c) o[x] = b[x];
            }
    }
    return out;
}

/// Blend coordinates for the soft model. The top value c_max is represented
/// as (c_max - 1, frac 1), which keeps the forward value identical while
/// giving the correct one-sided derivative at the boundary.
inline void soft_blend_coords(double v, int c_max, int& lo, double& frac) {
    int c = std::min(c_max, static_cast<int>(v));
    double t = v - c;
    if (c == c_max) {
        c = c_max - 1;
        t = 1.0;
    }
    lo = c;
    frac = t;
}

/// Soft variant: a non-integer map value v blends the two adjacent radius
/// classes linearly (weight 1 - frac on floor(v), frac on floor(v) + 1).
/// Coincides with the hard model on integer-valued maps; this is the
/// map-differentiable path used inside training losses.
inline Image reblur_soft(const Image& aif, const DefocusMap& map, const KernelBank& bank) {
    detail::check_reblur_inputs(aif, map, bank);
    const size_t npx = static_cast<size_t>(map.values.h) * map.values.w;
    std::vector<int> lo(npx);
    std::vector<double> frac(npx);
    std::vector<char> occupied(bank.c_max + 1, 0);
    for (size_t i = 0; i < npx; ++i) {
        soft_blend_coords(map.values.v[i], bank.c_max, lo[i], frac[i]);
        occupied[lo[i]] = 1;
        if (frac[i] > 0.0) occupied[lo[i] + 1] = 1;
    }
    Image out(1, aif.c, aif.h, aif.w);
    for (int c = 0; c <= bank.c_max; ++c) {
        if (!occupied[c]) continue;
        const Image blurred = c == 0 ? aif : convolve_image(aif, lookup(bank, c));
        for (int ch = 0; ch < aif.c; ++ch)
            for (int y = 0; y < aif.h; ++y) {
                const double* b = blurred.row(ch, y);
                double* o = out.row(ch, y);
                const size_t base = static_cast<size_t>(y) * aif.w;
                for (int x = 0; x < aif.w; ++x) {
                    const size_t i = base + x;
                    if (lo[i] == c)
                        o[x] += (1.0 - frac[i]) * b[x];
                    else if (lo[i] + 1 == c)
                        o[x] += frac[i] * b[x];
                }
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dual-pixel synthesis: each view blurs with the kernel restricted to one
// half of the aperture (center column at half weight), renormalized. For
// left-right symmetric kernels the view average reproduces the full blur
// exactly.
// ---------------------------------------------------------------------------

inline std::pair<Tensor, Tensor> split_kernel_lr(const Tensor& k) {
    const int ctr = k.w / 2;
    Tensor left = k, right = k;
    for (int y = 0; y < k.h; ++y)
        for (int x = 0; x < k.w; ++x) {
            const double wl = x < ctr ? 1.0 : (x == ctr ? 0.5 : 0.0);
            left.at(y, x) = k.at(y, x) * wl;
            right.at(y, x) = k.at(y, x) * (1.0 - wl);
        }
    const double sl = left.sum(), sr = right.sum();
    if (sl <= 0.0 || sr <= 0.0) throw NumericError("dual-pixel split produced an empty half-kernel");
    for (double& v : left.v) v /= sl;
    for (double& v : right.v) v /= sr;
    return {left, right};
}

inline std::pair<Image, Image> synthesize_dp_views(const Image& aif, const DefocusMap& map,
                                                   const KernelBank& bank) {
    detail::check_reblur_inputs(aif, map, bank);
    KernelBank left_bank = bank, right_bank = bank;
    for (int c = 1; c <= bank.c_max; ++c) {
        auto [l, r] = split_kernel_lr(bank.kernels[c]);
        left_bank.kernels[c] = std::move(l);
        right_bank.kernels[c] = std::move(r);
    }
    return {reblur(aif, map, left_bank), reblur(aif, map, right_bank)};
}

// ---------------------------------------------------------------------------
// Synthetic scenes.
// ---------------------------------------------------------------------------

struct SceneSample {
    Image aif, oof, dp_left, dp_right;
    std::optional<DefocusMap> gt_map;
    std::optional<Tensor> depth;  // (1,1,H,W), arbitrary units

    void validate() const {
        require_same_shape(aif, oof, "scene");
        require_same_shape(aif, dp_left, "scene");
        require_same_shape(aif, dp_right, "scene");
        if (gt_map && (gt_map->values.h != aif.h || gt_map->values.w != aif.w))
            throw ShapeError("scene: gt map shape differs from rasters");
    }
};

/// Plain-text scene descriptor (key = value). depth_layout is either
/// "coc:<v1,v2,...>" (vertical bands with direct CoC radii), "planes:<d1,...>"
/// (band depths put through the thin-lens mapping), or "ramp:<c0,c1>" (a
/// horizontal linear CoC ramp).
struct SceneSpec {
    int width = 96, height = 96;
    std::string texture = "noise";
    std::string depth_layout = "coc:0,6";
    double focal_depth = 1.0;
    double aperture = 40.0;
    uint64_t seed = 0;

    static SceneSpec from_config(const KeyValueConfig& cfg) {
        SceneSpec s;
        const std::string size = cfg.get_str("size", "96x96");
        const auto xpos = size.find('x');
        if (xpos == std::string::npos) throw ConfigError("scene size must look like 96x128");
        s.width = std::stoi(size.substr(0, xpos));
        s.height = std::stoi(size.substr(xpos + 1));
        if (s.width <= 0 || s.height <= 0) throw ConfigError("scene size must be positive");
        s.texture = cfg.get_str("texture", s.texture);
        s.depth_layout = cfg.get_str("depth_layout", s.depth_layout);
        s.focal_depth = cfg.get_double("focal_depth", s.focal_depth);
        s.aperture = cfg.get_double("aperture", s.aperture);
        s.seed = static_cast<uint64_t>(cfg.get_double("seed", 0));
        return s;
    }
    KeyValueConfig to_config() const {
        KeyValueConfig cfg;
        cfg.set("size", strf("%dx%d", width, height));
        cfg.set("texture", texture);
        cfg.set("depth_layout", depth_layout);
        cfg.set("focal_depth", focal_depth);
        cfg.set("aperture", aperture);
        cfg.set("seed", static_cast<long long>(seed));
        return cfg;
    }
};

namespace detail {

inline Image make_texture(const SceneSpec& spec, Rng& rng) {
    Image img(1, 3, spec.height, spec.width);
    if (spec.texture == "noise") {
        for (double& v : img.v) v = rng.uniform();
    } else if (spec.texture == "checker") {
        const int cell = std::max(2, spec.width / 12);
        double ca[3], cb[3];
        for (int c = 0; c < 3; ++c) {
            ca[c] = rng.uniform(0.6, 1.0);
            cb[c] = rng.uniform(0.0, 0.4);
        }
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x)
                    img.at(c, y, x) = ((x / cell + y / cell) % 2 == 0) ? ca[c] : cb[c];
    } else if (spec.texture == "gradient") {
        const double ang = rng.uniform(0.0, 6.283185307179586);
        const double gx = std::cos(ang), gy = std::sin(ang);
        for (int c = 0; c < 3; ++c) {
            const double phase = rng.uniform();
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x) {
                    const double t = (gx * x / spec.width + gy * y / spec.height + phase);
                    img.at(c, y, x) = 0.5 + 0.5 * std::sin(6.283185307179586 * t);
                }
        }
    } else if (spec.texture.rfind("image:", 0) == 0) {
        Image src = read_png(spec.texture.substr(6));
        if (src.c == 1) src = replicate_gray(src);
        img = area_resize(src, spec.height, spec.width);
    } else {
        throw ConfigError("unknown scene texture: " + spec.texture);
    }
    return img;
}

inline std::vector<double> parse_layout_values(const std::string& layout, const char* prefix) {
    std::vector<double> vals;
    std::string body = layout.substr(std::string(prefix).size());
    for (char& ch : body)
        if (ch == ',') ch = ' ';
    std::istringstream in(body);
    double v;
    while (in >> v) vals.push_back(v);
    if (vals.empty()) throw ConfigError("depth layout has no values: " + layout);
    return vals;
}

}  // namespace detail

/// Thin-lens CoC radius in pixels for a scene depth, clamped to [0, c_max].
inline double thin_lens_coc(double depth, double focal_depth, double aperture, double c_max) {
    if (depth <= 0.0 || focal_depth <= 0.0) throw ConfigError("depths must be positive");
    const double c = aperture * std::abs(1.0 / depth - 1.0 / focal_depth);
    return std::clamp(c, 0.0, c_max);
}

/// Ground-truth defocus map (and depth when using the thin-lens layout) for
/// a scene descriptor.
inline DefocusMap layout_map(const SceneSpec& spec, double c_max, Tensor* depth_out = nullptr) {
    DefocusMap map{Tensor::grid(spec.height, spec.width), c_max};
    if (spec.depth_layout.rfind("coc:", 0) == 0) {
        const auto cocs = detail::parse_layout_values(spec.depth_layout, "coc:");
        for (double c : cocs)
            if (c < 0.0 || c > c_max)
                throw RangeError(strf("scene CoC %g outside [0, %g]", c, c_max));
        const int bands = static_cast<int>(cocs.size());
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x)
                map.values.at(y, x) = cocs[std::min<int>(bands - 1, x * bands / spec.width)];
    } else if (spec.depth_layout.rfind("planes:", 0) == 0) {
        const auto depths = detail::parse_layout_values(spec.depth_layout, "planes:");
        const int bands = static_cast<int>(depths.size());
        if (depth_out) *depth_out = Tensor::grid(spec.height, spec.width);
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                const double d = depths[std::min<int>(bands - 1, x * bands / spec.width)];
                map.values.at(y, x) = thin_lens_coc(d, spec.focal_depth, spec.aperture, c_max);
                if (depth_out) depth_out->at(y, x) = d;
            }
    } else if (spec.depth_layout.rfind("ramp:", 0) == 0) {
        const auto ends = detail::parse_layout_values(spec.depth_layout, "ramp:");
        if (ends.size() != 2) throw ConfigError("ramp layout needs exactly two CoC values");
        for (double c : ends)
            if (c < 0.0 || c > c_max)
                throw RangeError(strf("scene CoC %g outside [0, %g]", c, c_max));
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                const double t = spec.width > 1 ? static_cast<double>(x) / (spec.width - 1) : 0.0;
                map.values.at(y, x) = ends[0] + t * (ends[1] - ends[0]);
            }
    } else {
        throw ConfigError("unknown depth layout: " + spec.depth_layout);
    }
    return map;
}

/// Deterministic synthetic sample: texture, ground-truth map, forward-model
/// blur and DP views. `index` forks the descriptor seed so one descriptor
/// can generate a family of scenes.
inline SceneSample generate_scene(const SceneSpec& spec, const KernelBank& bank,
                                  uint64_t index = 0) {
    Rng rng = Rng(spec.seed).fork(index);
    SceneSample s;
    s.aif = detail::make_texture(spec, rng);
    Tensor depth;
    DefocusMap map = layout_map(spec, bank.c_max, &depth);
    if (!depth.empty()) s.depth = depth;
    s.oof = reblur(s.aif, map, bank);
    auto [l, r] = synthesize_dp_views(s.aif, map, bank);
    s.dp_left = std::move(l);
    s.dp_right = std::move(r);
    s.gt_map = std::move(map);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Scene directory export/import: aif.png, oof.png, dp_l.png, dp_r.png
// (16-bit) plus gt_map.pfm.
// ---------------------------------------------------------------------------

inline void export_scene(const SceneSample& s, const std::string& dir) {
    write_png(dir + "/aif.png", s.aif, 16);
    write_png(dir + "/oof.png", s.oof, 16);
    write_png(dir + "/dp_l.png", s.dp_left, 16);
    write_png(dir + "/dp_r.png", s.dp_right, 16);
    if (s.gt_map) write_pfm(dir + "/gt_map.pfm", s.gt_map->values);
}

inline SceneSample import_scene(const std::string& dir, double c_max) {
    SceneSample s;
    s.aif = read_png(dir + "/aif.png");
    s.oof = read_png(dir + "/oof.png");
    s.dp_left = read_png(dir + "/dp_l.png");
    s.dp_right = read_png(dir + "/dp_r.png");
    std::ifstream probe(dir + "/gt_map.pfm");
    if (probe.good()) {
        probe.close();
        s.gt_map = DefocusMap{read_pfm(dir + "/gt_map.pfm"), c_max};
    }
    s.validate();
    return s;
}

}  // namespace dfl
