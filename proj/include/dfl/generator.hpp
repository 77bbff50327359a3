#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dfl/nn.hpp"
#include "dfl/reblur.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// The deblurring generator: defocus-map-guided blocks (DGB) with four
// CoC-range branches, residual channel-attention blocks, a 1/4 + 1/8
// multi-scale cascade, and the annealed guidance weight that lets the
// trained network run map-free on a single image.
// ---------------------------------------------------------------------------

struct AnnealSchedule {
    double w0 = 1.0;
    long long total_iters = 20000;

    void validate() const {
        if (!(w0 > 0.0) || w0 > 1.0) throw ConfigError("anneal: w0 must be in (0, 1]");
        if (total_iters < 1) throw ConfigError("anneal: total_iters must be >= 1");
    }
    double tau() const { return static_cast<double>(total_iters) / 5.0; }
};

/// Exponential decay with a hard cutoff: w(t) = w0 exp(-t/tau) for
/// t < total_iters and exactly 0 afterwards. Monotone nonincreasing.
inline double guidance_weight(const AnnealSchedule& s, long long t) {
    s.validate();
    if (t < 0) throw RangeError("guidance_weight: iteration must be >= 0");
    if (t >= s.total_iters) return 0.0;
    return s.w0 * std::exp(-static_cast<double>(t) / s.tau());
}

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

/// Branch boundaries {0, 1, 5, 12, 25} scaled to the working c_max.
inline std::vector<double> default_branch_boundaries(double c_max) {
    const double s = c_max / 25.0;
    return {0.0, 1.0 * s, 5.0 * s, 12.0 * s, c_max};
}

struct DGBConfig {
    std::vector<double> branch_boundaries;  // 5 values covering [0, c_max]
    int base_channels = 32;
    double c_max = 25.0;
    bool use_rcab = true;

    void validate() const {
        if (branch_boundaries.size() != 5)
            throw ConfigError("dgb: exactly 4 branches (5 boundaries) are supported");
        validate_boundaries(branch_boundaries, c_max);
        if (base_channels < 4) throw ConfigError("dgb: base_channels must be >= 4");
    }
};

struct GeneratorConfig {
    DGBConfig dgb;
    int in_channels = 3;
    bool use_dg = true;  ///< defocus guidance; off forces the uniform mixture
    bool use_ms = true;  ///< multi-scale cascade

    static GeneratorConfig defaults(double c_max = 25.0, int base_channels = 32) {
        GeneratorConfig cfg;
        cfg.dgb.c_max = c_max;
        cfg.dgb.base_channels = base_channels;
        cfg.dgb.branch_boundaries = default_branch_boundaries(c_max);
        return cfg;
    }
    void validate() const {
        dgb.validate();
        if (in_channels < 1) throw ConfigError("generator: in_channels must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Blocks.
// ---------------------------------------------------------------------------

/// Residual channel-attention block: conv - act - conv, gated per channel by
/// sigmoid(bottleneck(gap(.))), plus the identity shortcut.
struct Rcab {
    Conv2dLayer conv1, conv2, ca_down, ca_up;

    static Rcab make(int ch, Rng& rng) {
        Rcab b;
        b.conv1 = Conv2dLayer::make(ch, ch, 3, 1, rng);
        b.conv2 = Conv2dLayer::make(ch, ch, 3, 1, rng);
        const int mid = std::max(1, ch / 4);
        b.ca_down = Conv2dLayer::make(ch, mid, 1, 1, rng);
        b.ca_up = Conv2dLayer::make(mid, ch, 1, 1, rng);
        return b;
    }
    Var attention(const Var& body) const {
        return sigmoid(ca_up(relu(ca_down(global_avg_pool(body)))));
    }
    Var operator()(const Var& x) const {
        Var body = conv2(leaky_relu(conv1(x)));
        return add(x, scale_channels(body, attention(body)));
    }
    void collect(std::vector<Var>& out) const {
        conv1.collect(out);
        conv2.collect(out);
        ca_down.collect(out);
        ca_up.collect(out);
    }
};

inline Var rcab_forward(const Rcab& block, const Var& features) { return block(features); }

/// One plain conv + activation, the shallow branch's whole body.
struct ConvBlock {
    Conv2dLayer conv;
    static ConvBlock make(int ch, Rng& rng) { return {Conv2dLayer::make(ch, ch, 3, 1, rng)}; }
    Var operator()(const Var& x) const { return leaky_relu(conv(x)); }
    void collect(std::vector<Var>& out) const { conv.collect(out); }
};

/// Four branches of increasing depth: plain conv, then 1, 2, 3 attention
/// blocks (plain conv blocks when attention is disabled).
struct DgbBranch {
    std::vector<Rcab> rcabs;
    std::vector<ConvBlock> convs;

    static DgbBranch make(int ch, int depth, bool use_rcab, Rng& rng) {
        DgbBranch b;
        for (int i = 0; i < depth; ++i) {
            if (use_rcab)
                b.rcabs.push_back(Rcab::make(ch, rng));
            else
                b.convs.push_back(ConvBlock::make(ch, rng));
        }
        if (depth == 0) b.convs.push_back(ConvBlock::make(ch, rng));  // plain-conv branch
        return b;
    }
    Var operator()(Var x) const {
        for (const ConvBlock& c : convs) x = c(x);
        for (const Rcab& r : rcabs) x = r(x);
        return x;
    }
    void collect(std::vector<Var>& out) const {
        for (const ConvBlock& c : convs) c.collect(out);
        for (const Rcab& r : rcabs) r.collect(out);
    }
};

/// Soft branch-blend masks M_i = weight * K_i + (1 - weight) / N, where K_i
/// are the binary range masks. They sum to 1 at every pixel for any weight.
inline std::vector<Tensor> dgb_masks(const DGBConfig& cfg, const Tensor& map_values,
                                     double weight, int channels) {
    cfg.validate();
    if (weight < 0.0 || weight > 1.0) throw RangeError("dgb: weight must be in [0, 1]");
    const int n = 4;
    std::vector<Tensor> masks(n, Tensor(1, channels, map_values.h, map_values.w));
    const double uniform = (1.0 - weight) / n;
    for (int y = 0; y < map_values.h; ++y)
        for (int x = 0; x < map_values.w; ++x) {
            const int cls = quantize_class(map_values.at(y, x), cfg.branch_boundaries);
            for (int i = 0; i < n; ++i) {
                const double m = uniform + (cls == i ? weight : 0.0);
                for (int c = 0; c < channels; ++c) masks[i].at(c, y, x) = m;
            }
        }
    return masks;
}

struct Dgb {
    std::vector<DgbBranch> branches;  // 4
    DGBConfig cfg;

    static Dgb make(const DGBConfig& cfg, int ch, Rng& rng) {
        cfg.validate();
        Dgb d;
        d.cfg = cfg;
        const int depths[4] = {0, 1, 2, 3};
        for (int i = 0; i < 4; ++i)
            d.branches.push_back(DgbBranch::make(ch, depths[i], cfg.use_rcab, rng));
        return d;
    }

    /// Branch blend for a map already resized to the feature resolution. At
    /// weight 0 the map is never read, so the output is bitwise independent
    /// of it.
    Var operator()(const Var& features, const Tensor* map_values, double weight) const {
        if (weight < 0.0 || weight > 1.0) throw RangeError("dgb: weight must be in [0, 1]");
        const int n = static_cast<int>(branches.size());
        if (weight == 0.0) {
            Var sum;
            for (const DgbBranch& b : branches) {
                Var y = b(features);
                sum = sum ? add(sum, y) : y;
            }
            return smul(sum, 1.0 / n);
        }
        if (!map_values) throw ConfigError("dgb: guidance weight > 0 requires a defocus map");
        if (map_values->h != features->val.h || map_values->w != features->val.w)
            throw ShapeError(strf("dgb: map %dx%d vs features %dx%d", map_values->h,
                                  map_values->w, features->val.h, features->val.w));
        std::vector<Tensor> masks = dgb_masks(cfg, *map_values, weight, features->val.c);
        Var out;
        for (int i = 0; i < n; ++i) {
            Var y = mul_const(branches[i](features), std::move(masks[i]));
            out = out ? add(out, y) : y;
        }
        return out;
    }

    void collect(std::vector<Var>& out) const {
        for (const DgbBranch& b : branches) b.collect(out);
    }
};

/// Standalone form of the block forward (map pre-resized by the caller).
inline Var dgb_forward(const Dgb& block, const Var& features, const Tensor* map_values,
                       double weight) {
    return block(features, map_values, weight);
}

// ---------------------------------------------------------------------------
// Generator.
// ---------------------------------------------------------------------------

class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(seed);
        const int c1 = cfg.dgb.base_channels;
        const int c2 = std::max(4, c1 / 2), c3 = std::max(4, c1 / 4);
        stem_ = Conv2dLayer::make(cfg.in_channels, c1, 3, 1, rng);
        dgb1_ = Dgb::make(cfg.dgb, c1, rng);
        if (cfg.use_ms) {
            down1_ = Conv2dLayer::make(c1, c2, 3, 1, rng);
            dgb2_ = Dgb::make(cfg.dgb, c2, rng);
            down2_ = Conv2dLayer::make(c2, c3, 3, 1, rng);
            dgb3_ = Dgb::make(cfg.dgb, c3, rng);
            merge2_ = Conv2dLayer::make(c2 + c3, c2, 1, 1, rng);
            merge1_ = Conv2dLayer::make(c1 + c2, c1, 1, 1, rng);
        }
        head_ = Conv2dLayer::make(c1, cfg.in_channels, 3, 1, rng);
        // Start close to the identity: the residual path should dominate
        // until the refinement branches learn something useful.
        for (double& v : head_.w->val.v) v *= 0.01;
    }

    const GeneratorConfig& config() const { return cfg_; }

    /// Training/inference forward on a (1,C,H,W) image with H, W divisible
    /// by 8. A positive guidance weight requires a map; at weight 0 the
    /// output is map-free. The residual path keeps the network an identity
    /// perturbation around its blurred input.
    Var forward(const Tensor& oof, const DefocusMap* map, double weight) const {
        if (weight > 0.0 && !cfg_.use_dg) weight = 0.0;
        if (weight > 0.0 && !map)
            throw ConfigError("generator: guidance weight > 0 requires a defocus map");
        if (oof.h % 8 || oof.w % 8)
            throw ShapeError(strf("generator input %dx%d must be divisible by 8", oof.h, oof.w));
        if (map && (map->values.h != oof.h || map->values.w != oof.w))
            throw ShapeError("generator: map and image sizes differ");

        const bool guided = weight > 0.0;
        Tensor map1, map2, map3;
        if (guided) {
            map1 = map->values;
            // Area-average then re-quantize at consumption (inside the DGB).
            map2 = area_resize(map1, oof.h / 4, oof.w / 4);
            map3 = area_resize(map1, oof.h / 8, oof.w / 8);
        }
        Var x = make_const(oof);
        Var f1 = dgb1_(leaky_relu(stem_(x)), guided ? &map1 : nullptr, weight);
        Var fused = f1;
        if (cfg_.use_ms) {
            Var f2 = dgb2_(leaky_relu(down1_(avg_pool_op(f1, 4))), guided ? &map2 : nullptr,
                           weight);
            Var f3 = dgb3_(leaky_relu(down2_(avg_pool_op(f2, 2))), guided ? &map3 : nullptr,
                           weight);
            Var u2 = leaky_relu(merge2_(concat_channels(f2, bilinear_up_op(f3, 2))));
            fused = leaky_relu(merge1_(concat_channels(f1, bilinear_up_op(u2, 4))));
        }
        return add(head_(fused), x);
    }

    std::vector<Var> params() const {
        std::vector<Var> out;
        stem_.collect(out);
        dgb1_.collect(out);
        if (cfg_.use_ms) {
            down1_.collect(out);
            dgb2_.collect(out);
            down2_.collect(out);
            dgb3_.collect(out);
            merge2_.collect(out);
            merge1_.collect(out);
        }
        head_.collect(out);
        return out;
    }
    void set_trainable(bool on) const { dfl::set_trainable(params(), on); }

    std::vector<Var> branch_params(int scale_index, int branch) const {
        std::vector<Var> out;
        const Dgb* dgbs[3] = {&dgb1_, &dgb2_, &dgb3_};
        dgbs[scale_index]->branches.at(branch).collect(out);
        return out;
    }
    int num_scales() const { return cfg_.use_ms ? 3 : 1; }

    void save(const std::string& path) const {
        Archive a;
        a.meta.set("kind", std::string("generator"));
        a.meta.set("in_channels", cfg_.in_channels);
        a.meta.set("base_channels", cfg_.dgb.base_channels);
        a.meta.set("c_max", cfg_.dgb.c_max);
        a.meta.set("use_dg", std::string(cfg_.use_dg ? "true" : "false"));
        a.meta.set("use_ms", std::string(cfg_.use_ms ? "true" : "false"));
        a.meta.set("use_rcab", std::string(cfg_.dgb.use_rcab ? "true" : "false"));
        std::string bounds;
        for (double b : cfg_.dgb.branch_boundaries) bounds += strf("%.17g,", b);
        a.meta.set("branch_boundaries", bounds.substr(0, bounds.size() - 1));
        archive_params(a, "p", params());
        a.save(path);
    }
    static Generator load(const std::string& path) {
        const Archive a = Archive::load(path);
        if (a.meta.get_str("kind", "") != "generator")
            throw DataError(path + ": archive is not a generator");
        GeneratorConfig cfg;
        cfg.in_channels = a.meta.get_int("in_channels");
        cfg.dgb.base_channels = a.meta.get_int("base_channels");
        cfg.dgb.c_max = a.meta.get_double("c_max");
        cfg.use_dg = a.meta.get_bool("use_dg");
        cfg.use_ms = a.meta.get_bool("use_ms");
        cfg.dgb.use_rcab = a.meta.get_bool("use_rcab");
        cfg.dgb.branch_boundaries = a.meta.get_doubles("branch_boundaries");
        Generator g(cfg, 0);
        restore_params(a, "p", g.params());
        return g;
    }

private:
    GeneratorConfig cfg_;
    Conv2dLayer stem_, down1_, down2_, merge2_, merge1_, head_;
    Dgb dgb1_, dgb2_, dgb3_;
};

// ---------------------------------------------------------------------------
// Inference helpers (map-free path).
// ---------------------------------------------------------------------------

/// Pads to a multiple of 8 (mirror), runs the map-free forward, crops.
/// Gradient recording is disabled so full images stream through.
inline Image generator_infer(const Generator& gen, const Image& oof) {
    NoGradGuard ng;
    const int h = oof.h, w = oof.w;
    const int ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
    Tensor input = oof;
    if (ph != h || pw != w) {
        Tensor padded(1, oof.c, ph, pw);
        for (int c = 0; c < oof.c; ++c)
            for (int y = 0; y < ph; ++y)
                for (int x = 0; x < pw; ++x)
                    padded.at(c, y, x) = oof.at(c, reflect_index(y, h), reflect_index(x, w));
        input = std::move(padded);
    }
    const Var out = gen.forward(input, nullptr, 0.0);
    Image result(1, oof.c, h, w);
    for (int c = 0; c < oof.c; ++c)
        for (int y = 0; y < h; ++y)
            std::copy(out->val.row(c, y), out->val.row(c, y) + w, result.row(c, y));
    return result;
}

struct TileConfig {
    int tile = 384;     ///< output tile side (multiple of 8)
    int overlap = 64;   ///< linear blending band between tiles (multiple of 8)
    int context = 128;  ///< extra surrounding context per tile (multiple of 8)

    void validate() const {
        if (tile < 64 || tile % 8 || overlap < 8 || overlap % 8 || overlap >= tile ||
            context < 0 || context % 8)
            throw ConfigError("tile config: tile/overlap/context must be multiples of 8 with "
                              "8 <= overlap < tile");
    }
};

/// Tiled map-free inference with linear blending over the overlap bands.
/// Tile origins stay aligned to the generator's downsampling grid and each
/// tile carries surrounding context, so regions covered by a single tile
/// reproduce the untiled output whenever the context window spans the image.
inline Image generator_infer_tiled(const Generator& gen, const Image& oof,
                                   const TileConfig& tcfg) {
    tcfg.validate();
    if (oof.h <= tcfg.tile && oof.w <= tcfg.tile) return generator_infer(gen, oof);
    NoGradGuard ng;
    const int h = oof.h, w = oof.w;
    Image acc(1, oof.c, h, w);
    Tensor wacc = Tensor::grid(h, w);

    const int stride = tcfg.tile - tcfg.overlap;
    auto origins = [&](int extent) {
        std::vector<int> out;
        for (int o = 0;; o += stride) {
            if (o + tcfg.tile >= extent) {
                out.push_back(std::max(0, (extent - tcfg.tile) / 8 * 8));
                break;
            }
            out.push_back(o);
        }
        return out;
    };
    for (int y0 : origins(h))
        for (int x0 : origins(w)) {
            const int cy0 = std::max(0, y0 - tcfg.context);
            const int cx0 = std::max(0, x0 - tcfg.context);
            const int cy1 = std::min(h, y0 + tcfg.tile + tcfg.context);
            const int cx1 = std::min(w, x0 + tcfg.tile + tcfg.context);
            Image crop(1, oof.c, cy1 - cy0, cx1 - cx0);
            for (int c = 0; c < oof.c; ++c)
                for (int y = cy0; y < cy1; ++y)
                    std::copy(oof.row(c, y) + cx0, oof.row(c, y) + cx1,
                              crop.row(c, y - cy0));
            const Image restored = generator_infer(gen, crop);
            const int ty1 = std::min(h, y0 + tcfg.tile), tx1 = std::min(w, x0 + tcfg.tile);
            for (int y = y0; y < ty1; ++y) {
                // Linear ramp over the blending band, flat in the interior.
                const double wy = std::min(
                    1.0, (std::min(y - y0, ty1 - 1 - y) + 1.0) / tcfg.overlap * 2.0);
                for (int x = x0; x < tx1; ++x) {
                    const double wx = std::min(
                        1.0, (std::min(x - x0, tx1 - 1 - x) + 1.0) / tcfg.overlap * 2.0);
                    const double wt = wy * wx;
                    for (int c = 0; c < oof.c; ++c)
                        acc.at(c, y, x) += wt * restored.at(c, y - cy0, x - cx0);
                    wacc.at(y, x) += wt;
                }
            }
        }
    for (int c = 0; c < oof.c; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) acc.at(c, y, x) /= wacc.at(y, x);
    return acc;
}

}  // namespace dfl
