#pragma once

#include <string>
#include <vector>

#include "dfl/metrics.hpp"
#include "dfl/nn.hpp"
#include "dfl/reblur.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Unsupervised defocus-map estimation from dual-pixel views: the reblur
// geometric loss, the gradient smoothness prior, a fully-convolutional
// estimator network, a brute-force per-pixel oracle, and the alternating
// trainer that refines the estimator and the kernel bank in turns.
// ---------------------------------------------------------------------------

struct EstimatorConfig {
    double lambda_reg = 1e-5;
    double lr = 2e-5;
    double bank_lr = 0.0;  ///< 0: reuse lr for the kernel bank phases
    int warmup_epochs = 10;
    int alternation_period = 5;
    int total_epochs = 30;
    int c_max = 25;
    int batch_size = 4;

    void validate() const {
        if (lambda_reg < 0.0) throw ConfigError("estimator: lambda_reg must be >= 0");
        if (!(lr > 0.0)) throw ConfigError("estimator: lr must be > 0");
        if (warmup_epochs < 0 || warmup_epochs > total_epochs)
            throw ConfigError("estimator: need 0 <= warmup_epochs <= total_epochs");
        if (alternation_period < 1) throw ConfigError("estimator: alternation_period must be >= 1");
        if (c_max < 1) throw ConfigError("estimator: c_max must be >= 1");
        if (batch_size < 1) throw ConfigError("estimator: batch_size must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Losses (plain-value forms; the trainer uses the tape equivalents).
// ---------------------------------------------------------------------------

inline double reblur_geometric_loss(const Image& reblurred, const Image& oof) {
    require_same_shape(reblurred, oof, "reblur_geometric_loss");
    return mean_abs_diff(reblurred, oof);
}

/// Mean L1 norm of forward differences, zero-padded at the far edges.
inline double map_smoothness(const DefocusMap& map) {
    const Tensor& v = map.values;
    double s = 0.0;
    for (int y = 0; y < v.h; ++y)
        for (int x = 0; x < v.w; ++x) {
            if (x + 1 < v.w) s += std::abs(v.at(y, x + 1) - v.at(y, x));
            if (y + 1 < v.h) s += std::abs(v.at(y + 1, x) - v.at(y, x));
        }
    return s / static_cast<double>(v.size());
}

inline double total_map_loss(const Image& reblurred, const Image& oof, const DefocusMap& map,
                             const EstimatorConfig& cfg) {
    return reblur_geometric_loss(reblurred, oof) + cfg.lambda_reg * map_smoothness(map);
}

// ---------------------------------------------------------------------------
// Brute-force oracle: per pixel, the radius class whose constant reblur best
// matches the blurred capture over a window. Ties break toward smaller c.
// ---------------------------------------------------------------------------

inline DefocusMap oracle_estimate_map(const Image& aif, const Image& oof, const KernelBank& bank,
                                      int window) {
    require_same_shape(aif, oof, "oracle_estimate_map");
    if (window < 1 || window % 2 == 0)
        throw ConfigError(strf("oracle window must be odd and >= 1, got %d", window));
    const int h = aif.h, w = aif.w, r = window / 2;
    Tensor best_err = Tensor::grid(h, w, 1e300);
    Tensor best_cls = Tensor::grid(h, w);
    for (int c = 0; c <= bank.c_max; ++c) {
        const Image blurred = c == 0 ? aif : convolve_image(aif, lookup(bank, c));
        Tensor diff = Tensor::grid(h, w);
        for (int ch = 0; ch < aif.c; ++ch)
            for (int y = 0; y < h; ++y) {
                const double* b = blurred.row(ch, y);
                const double* o = oof.row(ch, y);
                double* d = diff.row(0, y);
                for (int x = 0; x < w; ++x) d[x] += std::abs(b[x] - o[x]);
            }
        const Tensor sat = integral_image(diff);
#pragma omp parallel for schedule(static)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
                const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
                const double err =
                    box_sum(sat, y0, x0, y1, x1) / ((y1 - y0 + 1) * (x1 - x0 + 1));
                if (err < best_err.at(y, x)) {
                    best_err.at(y, x) = err;
                    best_cls.at(y, x) = c;
                }
            }
    }
    return DefocusMap{std::move(best_cls), static_cast<double>(bank.c_max)};
}

// ---------------------------------------------------------------------------
// The estimator network f: single-branch encoder-decoder with skips, eight
// convolution layers, 6-channel DP stack in, one map channel out, bounded
// by a sigmoid scaled to [0, c_max].
// ---------------------------------------------------------------------------

struct EstimatorArch {
    int in_channels = 6;
    int base_channels = 16;
    double c_max = 25.0;

    void validate() const {
        if (in_channels < 1 || base_channels < 1 || c_max < 1)
            throw ConfigError("estimator arch: channels and c_max must be positive");
    }
};

class MapEstimator {
public:
    MapEstimator() = default;
    MapEstimator(const EstimatorArch& arch, uint64_t seed) : arch_(arch) {
        arch.validate();
        Rng rng(seed);
        const int w = arch.base_channels;
        enc1_ = Conv2dLayer::make(arch.in_channels, w, 3, 1, rng);
        enc2_ = Conv2dLayer::make(w, 2 * w, 3, 2, rng);
        enc3_ = Conv2dLayer::make(2 * w, 4 * w, 3, 2, rng);
        mid_ = Conv2dLayer::make(4 * w, 4 * w, 3, 1, rng);
        dec2_ = Conv2dLayer::make(4 * w + 2 * w, 2 * w, 3, 1, rng);
        dec1_ = Conv2dLayer::make(2 * w + w, w, 3, 1, rng);
        post_ = Conv2dLayer::make(w, w, 3, 1, rng);
        head_ = Conv2dLayer::make(w, 1, 3, 1, rng);
        // Small head init keeps the squashing away from its rails, where
        // the map would start pinned at 0 or c_max with no usable gradient.
        for (double& v : head_.w->val.v) v *= 0.05;
    }

    const EstimatorArch& arch() const { return arch_; }

    /// Forward over a (1, in_channels, H, W) stack; H and W must be
    /// divisible by 4.
    Var forward(const Var& x) const {
        if (x->val.h % 4 || x->val.w % 4)
            throw ShapeError(strf("estimator input %dx%d must be divisible by 4", x->val.h,
                                  x->val.w));
        Var e1 = leaky_relu(enc1_(x));
        Var e2 = leaky_relu(enc2_(e1));
        Var e3 = leaky_relu(enc3_(e2));
        Var m = leaky_relu(mid_(e3));
        Var d2 = leaky_relu(dec2_(concat_channels(bilinear_up_op(m, 2), e2)));
        Var d1 = leaky_relu(dec1_(concat_channels(bilinear_up_op(d2, 2), e1)));
        Var p = leaky_relu(post_(d1));
        // Steepened squashing: the map must be able to reach both ends of
        // [0, c_max] without driving pre-activations far from zero.
        return smul(sigmoid(smul(head_(p), 4.0)), arch_.c_max);
    }

    std::vector<Var> params() const {
        std::vector<Var> out;
        for (const Conv2dLayer* l : layers()) l->collect(out);
        return out;
    }
    void set_trainable(bool on) const {
        for (const Conv2dLayer* l : layers()) l->set_trainable(on);
    }

    void save(const std::string& path) const {
        Archive a;
        a.meta.set("kind", std::string("map_estimator"));
        a.meta.set("in_channels", arch_.in_channels);
        a.meta.set("base_channels", arch_.base_channels);
        a.meta.set("c_max", arch_.c_max);
        archive_params(a, "p", params());
        a.save(path);
    }
    static MapEstimator load(const std::string& path) {
        const Archive a = Archive::load(path);
        if (a.meta.get_str("kind", "") != "map_estimator")
            throw DataError(path + ": archive is not a map estimator");
        EstimatorArch arch;
        arch.in_channels = a.meta.get_int("in_channels");
        arch.base_channels = a.meta.get_int("base_channels");
        arch.c_max = a.meta.get_double("c_max");
        MapEstimator f(arch, 0);
        restore_params(a, "p", f.params());
        return f;
    }

private:
    std::vector<const Conv2dLayer*> layers() const {
        return {&enc1_, &enc2_, &enc3_, &mid_, &dec2_, &dec1_, &post_, &head_};
    }
    EstimatorArch arch_;
    Conv2dLayer enc1_, enc2_, enc3_, mid_, dec2_, dec1_, post_, head_;
};

inline MapEstimator build_estimator_f(const EstimatorArch& arch, uint64_t seed = 0) {
    return MapEstimator(arch, seed);
}

inline Tensor stack_dp_views(const Image& dp_left, const Image& dp_right) {
    require_same_shape(dp_left, dp_right, "stack_dp_views");
    Tensor x(1, dp_left.c + dp_right.c, dp_left.h, dp_left.w);
    std::copy(dp_left.v.begin(), dp_left.v.end(), x.v.begin());
    std::copy(dp_right.v.begin(), dp_right.v.end(), x.v.begin() + dp_left.v.size());
    return x;
}

/// Inference on arbitrary sizes: mirror-pad to a multiple of 4, crop back.
inline DefocusMap estimate_map(const MapEstimator& f, const Image& dp_left,
                               const Image& dp_right) {
    Tensor x = stack_dp_views(dp_left, dp_right);
    const int h = x.h, w = x.w;
    const int ph = (h + 3) / 4 * 4, pw = (w + 3) / 4 * 4;
    if (ph != h || pw != w) {
        Tensor padded(1, x.c, ph, pw);
        for (int c = 0; c < x.c; ++c)
            for (int y = 0; y < ph; ++y)
                for (int xx = 0; xx < pw; ++xx)
                    padded.at(c, y, xx) = x.at(c, reflect_index(y, h), reflect_index(xx, w));
        x = std::move(padded);
    }
    const Var out = f.forward(make_const(std::move(x)));
    Tensor values = Tensor::grid(h, w);
    for (int y = 0; y < h; ++y)
        std::copy(out->val.row(0, y), out->val.row(0, y) + w, values.row(0, y));
    return DefocusMap{std::move(values), f.arch().c_max};
}

/// PFM plus an 8-bit preview normalized by c_max (whiter = more defocus).
inline void export_map(const DefocusMap& map, const std::string& base_path) {
    write_pfm(base_path + ".pfm", map.values);
    Tensor preview = map.values;
    if (map.c_max > 0)
        for (double& v : preview.v) v /= map.c_max;
    write_png(base_path + ".png", preview, 8);
}

// ---------------------------------------------------------------------------
// Differentiable spatially-varying reblur op. Non-integer map values blend
// the two adjacent radius classes, which is what lets the geometric loss
// pull on the estimator; kernel gradients accumulate per occupied class.
// ---------------------------------------------------------------------------

/// Kernel bank as tape parameters (class 0 stays the fixed identity).
struct TrainableBank {
    int c_max = 0;
    std::vector<Var> kernels;  // index 0 unused

    static TrainableBank from_bank(const KernelBank& bank) {
        TrainableBank tb;
        tb.c_max = bank.c_max;
        tb.kernels.resize(bank.c_max + 1);
        for (int c = 1; c <= bank.c_max; ++c) tb.kernels[c] = make_param(bank.kernels[c]);
        return tb;
    }
    /// Snapshot back into a plain bank (kernels copied as-is).
    void write_to(KernelBank& bank) const {
        for (int c = 1; c <= bank.c_max; ++c) bank.kernels[c] = kernels[c]->val;
    }
    std::vector<Var> params() const {
        return std::vector<Var>(kernels.begin() + 1, kernels.end());
    }
    void set_trainable(bool on) const {
        for (int c = 1; c <= c_max; ++c) kernels[c]->requires_grad = on;
    }
    /// Projected-gradient step companion: clamp and renormalize every kernel.
    void reproject() const {
        for (int c = 1; c <= c_max; ++c) reproject_kernel(kernels[c]->val, c);
    }
};

inline Var reblur_soft_op(const Image& aif, const Var& map, const TrainableBank& bank) {
    if (aif.h != map->val.h || aif.w != map->val.w)
        throw ShapeError("reblur_soft_op: image and map sizes differ");
    const int c_max = bank.c_max;
    const size_t npx = static_cast<size_t>(aif.h) * aif.w;

    struct Cache {
        std::vector<int> lo;
        std::vector<double> frac;
        std::vector<Tensor> blurred;       // per class, empty when unoccupied
        std::vector<Tensor> padded;        // per class, for kernel gradients
        Image aif;
    };
    auto cache = std::make_shared<Cache>();
    cache->aif = aif;
    cache->lo.resize(npx);
    cache->frac.resize(npx);
    cache->blurred.resize(c_max + 1);
    cache->padded.resize(c_max + 1);

    std::vector<char> occupied(c_max + 1, 0);
    for (size_t i = 0; i < npx; ++i) {
        const double v = map->val.v[i];
        if (!std::isfinite(v) || v < 0.0 || v > c_max)
            throw RangeError(strf("reblur_soft_op: map value %g outside [0, %d]", v, c_max));
        soft_blend_coords(v, c_max, cache->lo[i], cache->frac[i]);
        // Both adjacent classes are materialized so the map keeps its
        // (upward one-sided) derivative even at integer values.
        occupied[cache->lo[i]] = 1;
        occupied[cache->lo[i] + 1] = 1;
    }
    Tensor out(1, aif.c, aif.h, aif.w);
    for (int c = 0; c <= c_max; ++c) {
        if (!occupied[c]) continue;
        cache->blurred[c] = c == 0 ? aif : convolve_image(aif, bank.kernels[c]->val);
        const Tensor& b = cache->blurred[c];
        for (int ch = 0; ch < aif.c; ++ch)
            for (int y = 0; y < aif.h; ++y) {
                const double* br = b.row(ch, y);
                double* o = out.row(ch, y);
                const size_t base = static_cast<size_t>(y) * aif.w;
                for (int x = 0; x < aif.w; ++x) {
                    const size_t i = base + x;
                    if (cache->lo[i] == c)
                        o[x] += (1.0 - cache->frac[i]) * br[x];
                    else if (cache->lo[i] + 1 == c)
                        o[x] += cache->frac[i] * br[x];
                }
            }
    }

    std::vector<Var> parents{map};
    for (int c = 1; c <= c_max; ++c)
        if (occupied[c]) parents.push_back(bank.kernels[c]);
    std::vector<int> parent_class(parents.size(), -1);
    for (size_t i = 1; i < parents.size(); ++i) {
        for (int c = 1; c <= c_max; ++c)
            if (parents[i] == bank.kernels[c]) parent_class[i] = c;
    }

    return make_op(std::move(out), std::move(parents),
                   [cache, parent_class](Node& n) {
                       const Var& map = n.parents[0];
                       const Image& aif = cache->aif;
                       if (map->requires_grad) {
                           Tensor& g = map->g();
                           for (int y = 0; y < aif.h; ++y)
                               for (int x = 0; x < aif.w; ++x) {
                                   const size_t i = static_cast<size_t>(y) * aif.w + x;
                                   const int c = cache->lo[i];
                                   const Tensor& blo = cache->blurred[c];
                                   const Tensor& bhi = cache->blurred[c + 1];
                                   double acc = 0.0;
                                   for (int ch = 0; ch < aif.c; ++ch)
                                       acc += n.grad.at(ch, y, x) *
                                              (bhi.at(ch, y, x) - blo.at(ch, y, x));
                                   g.at(y, x) += acc;
                               }
                       }
                       for (size_t pi = 1; pi < n.parents.size(); ++pi) {
                           const Var& kv = n.parents[pi];
                           if (!kv->requires_grad) continue;
                           const int c = parent_class[pi];
                           if (cache->padded[c].empty()) cache->padded[c] = reflect_pad(aif, c);
                           // Gradient flows through the per-pixel blend weight.
                           Tensor gmasked(1, aif.c, aif.h, aif.w);
                           for (int ch = 0; ch < aif.c; ++ch)
                               for (int y = 0; y < aif.h; ++y)
                                   for (int x = 0; x < aif.w; ++x) {
                                       const size_t i = static_cast<size_t>(y) * aif.w + x;
                                       double wgt = 0.0;
                                       if (cache->lo[i] == c)
                                           wgt = 1.0 - cache->frac[i];
                                       else if (cache->lo[i] + 1 == c)
                                           wgt = cache->frac[i];
                                       gmasked.at(ch, y, x) = wgt * n.grad.at(ch, y, x);
                                   }
                           kv->g() += convolve_kernel_grad(cache->padded[c], gmasked, c);
                       }
                   });
}

// ---------------------------------------------------------------------------
// Alternating trainer.
// ---------------------------------------------------------------------------

enum class TrainPhase { F, Bank };

inline std::vector<TrainPhase> phase_schedule(const EstimatorConfig& cfg) {
    cfg.validate();
    std::vector<TrainPhase> phases;
    phases.reserve(cfg.total_epochs);
    for (int e = 0; e < cfg.warmup_epochs; ++e) phases.push_back(TrainPhase::F);
    TrainPhase current = TrainPhase::Bank;
    int run = 0;
    while (static_cast<int>(phases.size()) < cfg.total_epochs) {
        phases.push_back(current);
        if (++run == cfg.alternation_period) {
            run = 0;
            current = current == TrainPhase::F ? TrainPhase::Bank : TrainPhase::F;
        }
    }
    return phases;
}

struct EpochStats {
    int epoch = 0;  // 1-based
    TrainPhase phase = TrainPhase::F;
    double mean_loss = 0.0;
    double mean_smoothness = 0.0;
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
    std::ostringstream out;
    out << "epoch,phase,mean_loss,mean_smoothness\n";
    for (const EpochStats& e : history)
        out << strf("%d,%s,%.8g,%.8g\n", e.epoch, e.phase == TrainPhase::F ? "f" : "bank",
                    e.mean_loss, e.mean_smoothness);
    return out.str();
}

/// Trains f and the bank on SceneSamples. The bank argument is updated in
/// place; f likewise. Returns the per-epoch history.
inline std::vector<EpochStats> train_defocus_estimator(const std::vector<SceneSample>& dataset,
                                                       MapEstimator& f, KernelBank& bank,
                                                       const EstimatorConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw DataError("train_defocus_estimator: empty dataset");
    if (bank.c_max != cfg.c_max)
        throw ConfigError(strf("bank c_max %d does not match config c_max %d", bank.c_max,
                               cfg.c_max));
    TrainableBank tbank = TrainableBank::from_bank(bank);
    Adam opt_f(f.params(), cfg.lr);
    Adam opt_bank(tbank.params(), cfg.bank_lr > 0.0 ? cfg.bank_lr : cfg.lr);

    const std::vector<TrainPhase> phases = phase_schedule(cfg);
    std::vector<EpochStats> history;
    for (int epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
        const TrainPhase phase = phases[epoch - 1];
        f.set_trainable(phase == TrainPhase::F);
        tbank.set_trainable(phase == TrainPhase::Bank);

        double loss_sum = 0.0, smooth_sum = 0.0;
        int batches = 0;
        for (size_t start = 0; start < dataset.size(); start += cfg.batch_size) {
            const size_t end = std::min(dataset.size(), start + cfg.batch_size);
            Var batch_loss;
            double batch_smooth = 0.0;
            for (size_t i = start; i < end; ++i) {
                const SceneSample& s = dataset[i];
                Var map = f.forward(make_const(stack_dp_views(s.dp_left, s.dp_right)));
                Var reblurred = reblur_soft_op(s.aif, map, tbank);
                Var loss = add(l1_loss(reblurred, s.oof), smul(grad_l1_prior(map), cfg.lambda_reg));
                batch_smooth += grad_l1_prior(map)->val.v[0];
                batch_loss = batch_loss ? add(batch_loss, loss) : loss;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            batch_loss = smul(batch_loss, inv);
            const double loss_value = batch_loss->val.v[0];
            if (!std::isfinite(loss_value))
                throw NumericError(strf("NaN loss at epoch %d batch %d; training halted", epoch,
                                        batches));
            opt_f.zero_grad();
            opt_bank.zero_grad();
            backward(batch_loss);
            if (phase == TrainPhase::F) {
                opt_f.step();
            } else {
                opt_bank.step();
                try {
                    tbank.reproject();
                } catch (const NumericError& e) {
                    throw NumericError(strf("epoch %d: %s", epoch, e.what()));
                }
            }
            loss_sum += loss_value;
            smooth_sum += batch_smooth * inv;
            ++batches;
        }
        history.push_back({epoch, phase, loss_sum / batches, smooth_sum / batches});
    }
    tbank.write_to(bank);
    bank.validate();
    return history;
}

}  // namespace dfl
