#pragma once

#include <functional>

#include "dfl/generator.hpp"
#include "dfl/metrics.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// The adversarial half of the system: a patch critic with unbounded scores,
// the defocus-weighted adversarial losses, the WGAN-style gradient penalty
// (with its exact parameter gradients, hand-derived for the piecewise-linear
// critic), the pluggable perceptual loss, and the GAN training loop.
// ---------------------------------------------------------------------------

struct LossConfig {
    double alpha = 0.012;   ///< perceptual weight
    double beta = 0.002;    ///< adversarial weight
    double gp_coeff = 10.0; ///< gradient-penalty coefficient
    double gamma = 1.0;     ///< defocus-weight strength

    void validate() const {
        if (alpha < 0 || beta < 0 || gp_coeff < 0 || gamma < 0)
            throw ConfigError("loss config: alpha, beta, gp_coeff, gamma must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Defocus weights: pool the map to the score grid, weight 1 + gamma * c/cmax,
// normalize to mean 1 so the uniform-map case reduces exactly to the
// unweighted critic.
// ---------------------------------------------------------------------------

struct WeightMap {
    Tensor values;  // (1,1,N,M), mean 1, elementwise >= 0
};

inline WeightMap defocus_weights(const DefocusMap& map, int out_h, int out_w, double gamma) {
    map.validate();
    if (gamma < 0) throw ConfigError("defocus_weights: gamma must be >= 0");
    if (map.values.max() == map.values.min())
        return {Tensor::grid(out_h, out_w, 1.0)};  // pooling a constant is exact
    Tensor pooled = area_resize(map.values, out_h, out_w);
    const double cmax = map.c_max > 0 ? map.c_max : 1.0;
    for (double& v : pooled.v) v = 1.0 + gamma * (v / cmax);
    const double mean = pooled.mean();
    for (double& v : pooled.v) v /= mean;
    return {std::move(pooled)};
}

// ---------------------------------------------------------------------------
// The critic: stride-2 convolutions with leaky-relu between them, one score
// channel out, no output squashing. Parameters are tape leaves so Adam and
// checkpointing are shared, but forward/backward are explicit because the
// gradient penalty needs second-order structure.
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
    int in_channels = 3;
    std::vector<int> hidden = {64, 128};  ///< two hidden widths; 3 conv layers total
    int kernel = 4;

    void validate() const {
        if (in_channels < 1 || hidden.size() != 2 || hidden[0] < 1 || hidden[1] < 1 || kernel < 2)
            throw ConfigError("discriminator config invalid");
    }
};

class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const DiscriminatorConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(seed);
        const int chans[4] = {cfg.in_channels, cfg.hidden[0], cfg.hidden[1], 1};
        for (int i = 0; i < 3; ++i) {
            Tensor w(chans[i + 1], chans[i], cfg.kernel, cfg.kernel);
            const double std = std::sqrt(2.0 / (chans[i] * cfg.kernel * cfg.kernel));
            for (double& v : w.v) v = rng.normal(0.0, std);
            weights_.push_back(make_param(std::move(w)));
            biases_.push_back(make_param(Tensor(1, chans[i + 1], 1, 1)));
        }
    }

    const DiscriminatorConfig& config() const { return cfg_; }
    static constexpr double kSlope = 0.2;

    struct Cache {
        std::vector<Tensor> inputs;  // input to each conv layer
        std::vector<Tensor> masks;   // leaky-relu derivative masks (layers 0..L-2)
    };

    /// Patch scores (1,1,N,M); N scales with the input size.
    Tensor forward(const Tensor& x, Cache* cache = nullptr) const {
        Tensor a = x;
        if (cache) {
            cache->inputs.clear();
            cache->masks.clear();
        }
        for (size_t i = 0; i < weights_.size(); ++i) {
            if (cache) cache->inputs.push_back(a);
            std::vector<double> b(biases_[i]->val.v.begin(), biases_[i]->val.v.end());
            Tensor z = conv2d_fwd(a, weights_[i]->val, b, 2, 1);
            if (i + 1 < weights_.size()) {
                Tensor mask(z.n, z.c, z.h, z.w);
                for (size_t j = 0; j < z.v.size(); ++j) {
                    mask.v[j] = z.v[j] > 0.0 ? 1.0 : kSlope;
                    if (z.v[j] <= 0.0) z.v[j] *= kSlope;
                }
                if (cache) cache->masks.push_back(std::move(mask));
            }
            a = std::move(z);
        }
        return a;
    }

    /// d(scores . gscores)/d(input).
    Tensor input_grad(const Cache& cache, const Tensor& gscores) const {
        Tensor d = gscores;
        for (int i = static_cast<int>(weights_.size()) - 1; i >= 0; --i) {
            Tensor e = conv2d_dgrad(d, weights_[i]->val, 2, 1, cache.inputs[i].h,
                                    cache.inputs[i].w);
            if (i > 0)
                for (size_t j = 0; j < e.v.size(); ++j) e.v[j] *= cache.masks[i - 1].v[j];
            d = std::move(e);
        }
        return d;
    }

    /// Accumulates parameter gradients of (scores . gscores).
    void accumulate_param_grads(const Cache& cache, const Tensor& gscores) const {
        std::vector<Tensor> deltas(weights_.size());
        deltas.back() = gscores;
        for (int i = static_cast<int>(weights_.size()) - 1; i > 0; --i) {
            Tensor e = conv2d_dgrad(deltas[i], weights_[i]->val, 2, 1, cache.inputs[i].h,
                                    cache.inputs[i].w);
            for (size_t j = 0; j < e.v.size(); ++j) e.v[j] *= cache.masks[i - 1].v[j];
            deltas[i - 1] = std::move(e);
        }
        for (size_t i = 0; i < weights_.size(); ++i) {
            Tensor& gw = weights_[i]->g();
            std::vector<double> gb(biases_[i]->val.v.size(), 0.0);
            conv2d_wgrad(cache.inputs[i], deltas[i], 2, 1, gw, gb);
            Tensor& gbt = biases_[i]->g();
            for (size_t j = 0; j < gb.size(); ++j) gbt.v[j] += gb[j];
        }
    }

    /// One sample of the gradient penalty ((||d mean-score/d x|| - 1)^2) and,
    /// when `accumulate` is set, its exact parameter gradients scaled by
    /// `scale`. For this piecewise-linear critic the second-order term is a
    /// linearized forward pass of the penalty's input-gradient direction
    /// through the saved activation masks; bias gradients vanish.
    double gradient_penalty_sample(const Tensor& xhat, bool accumulate, double scale) const {
        Cache cache;
        const Tensor scores = forward(xhat, &cache);
        Tensor j(scores.n, scores.c, scores.h, scores.w,
                 1.0 / static_cast<double>(scores.size()));

        std::vector<Tensor> deltas(weights_.size());
        deltas.back() = j;
        for (int i = static_cast<int>(weights_.size()) - 1; i > 0; --i) {
            Tensor e = conv2d_dgrad(deltas[i], weights_[i]->val, 2, 1, cache.inputs[i].h,
                                    cache.inputs[i].w);
            for (size_t jj = 0; jj < e.v.size(); ++jj) e.v[jj] *= cache.masks[i - 1].v[jj];
            deltas[i - 1] = std::move(e);
        }
        Tensor g = conv2d_dgrad(deltas[0], weights_[0]->val, 2, 1, xhat.h, xhat.w);
        double norm2 = 0.0;
        for (double v : g.v) norm2 += v * v;
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) throw NumericError("gradient penalty: non-finite input gradient");
        const double penalty = (norm - 1.0) * (norm - 1.0);
        if (!accumulate) return penalty;

        // u = dP/dg, pushed forward through the linearized network.
        const double coeff = norm > 0.0 ? 2.0 * (norm - 1.0) / norm : 0.0;
        Tensor p = g;
        for (double& v : p.v) v *= coeff;
        const std::vector<double> no_bias;
        for (size_t i = 0; i < weights_.size(); ++i) {
            Tensor& gw = weights_[i]->g();
            Tensor scaled_delta = deltas[i];
            for (double& v : scaled_delta.v) v *= scale;
            std::vector<double> gb_ignored;
            conv2d_wgrad(p, scaled_delta, 2, 1, gw, gb_ignored);
            if (i + 1 < weights_.size()) {
                Tensor q = conv2d_fwd(p, weights_[i]->val, no_bias, 2, 1);
                for (size_t jj = 0; jj < q.v.size(); ++jj) q.v[jj] *= cache.masks[i].v[jj];
                p = std::move(q);
            }
        }
        return penalty;
    }

    std::vector<Var> params() const {
        std::vector<Var> out;
        for (size_t i = 0; i < weights_.size(); ++i) {
            out.push_back(weights_[i]);
            out.push_back(biases_[i]);
        }
        return out;
    }
    void zero_grad() const {
        for (const Var& p : params()) p->zero_grad();
    }

    void save(const std::string& path) const {
        Archive a;
        a.meta.set("kind", std::string("discriminator"));
        a.meta.set("in_channels", cfg_.in_channels);
        a.meta.set("hidden0", cfg_.hidden[0]);
        a.meta.set("hidden1", cfg_.hidden[1]);
        a.meta.set("kernel", cfg_.kernel);
        archive_params(a, "p", params());
        a.save(path);
    }
    static Discriminator load(const std::string& path) {
        const Archive a = Archive::load(path);
        if (a.meta.get_str("kind", "") != "discriminator")
            throw DataError(path + ": archive is not a discriminator");
        DiscriminatorConfig cfg;
        cfg.in_channels = a.meta.get_int("in_channels");
        cfg.hidden = {a.meta.get_int("hidden0"), a.meta.get_int("hidden1")};
        cfg.kernel = a.meta.get_int("kernel");
        Discriminator d(cfg, 0);
        restore_params(a, "p", d.params());
        return d;
    }

private:
    DiscriminatorConfig cfg_;
    std::vector<Var> weights_, biases_;
};

inline Discriminator build_discriminator(const DiscriminatorConfig& cfg, uint64_t seed = 0) {
    return Discriminator(cfg, seed);
}

/// Critic scores as a tape op so the generator's adversarial gradient flows
/// through the critic's input-backward.
inline Var disc_score_op(const Var& fake, const Discriminator& disc) {
    auto cache = std::make_shared<Discriminator::Cache>();
    Tensor scores = disc.forward(fake->val, cache.get());
    return make_op(std::move(scores), {fake}, [cache, &disc](Node& n) {
        n.parents[0]->g() += disc.input_grad(*cache, n.grad);
    });
}

// ---------------------------------------------------------------------------
// Loss pieces.
// ---------------------------------------------------------------------------

/// Generator-side defocus adversarial loss: -mean(w . scores).
inline double defocus_adv_loss_G(const Tensor& disc_scores, const WeightMap& wmap) {
    require_same_shape(disc_scores, wmap.values, "defocus_adv_loss_G");
    double s = 0.0;
    for (size_t i = 0; i < disc_scores.v.size(); ++i) s += disc_scores.v[i] * wmap.values.v[i];
    return -s / static_cast<double>(disc_scores.v.size());
}

inline Var defocus_adv_loss_G_op(const Var& disc_scores, const WeightMap& wmap) {
    return smul(weighted_mean(disc_scores, wmap.values), -1.0);
}

/// Critic loss: mean(w . fake) - mean(w . real) + gp_coeff * gp. The same
/// weights apply to both terms.
inline double disc_loss(const Tensor& real_scores, const Tensor& fake_scores,
                        const WeightMap& wmap, double gp, double gp_coeff) {
    require_same_shape(real_scores, fake_scores, "disc_loss");
    require_same_shape(real_scores, wmap.values, "disc_loss");
    if (gp < 0.0) throw RangeError("disc_loss: gp must be >= 0");
    double sf = 0.0, sr = 0.0;
    for (size_t i = 0; i < real_scores.v.size(); ++i) {
        sf += fake_scores.v[i] * wmap.values.v[i];
        sr += real_scores.v[i] * wmap.values.v[i];
    }
    const double n = static_cast<double>(real_scores.v.size());
    return sf / n - sr / n + gp_coeff * gp;
}

/// Batch gradient penalty value (no parameter gradients).
inline double gradient_penalty(const Discriminator& disc, const std::vector<Image>& real,
                               const std::vector<Image>& fake, Rng& rng) {
    if (real.size() != fake.size() || real.empty())
        throw ShapeError("gradient_penalty: batch sizes differ or empty");
    double total = 0.0;
    for (size_t b = 0; b < real.size(); ++b) {
        require_same_shape(real[b], fake[b], "gradient_penalty");
        const double eps = rng.uniform();
        Tensor xhat = real[b];
        for (size_t i = 0; i < xhat.v.size(); ++i)
            xhat.v[i] = eps * real[b].v[i] + (1.0 - eps) * fake[b].v[i];
        total += disc.gradient_penalty_sample(xhat, false, 0.0);
    }
    return total / static_cast<double>(real.size());
}

// ---------------------------------------------------------------------------
// Perceptual loss: a frozen convolutional feature extractor. The
// paper-faithful mode loads pretrained weights from a checkpoint; without
// one, construction fails loudly. Test/training-at-desk-scale mode uses a
// fixed-seed random extractor.
// ---------------------------------------------------------------------------

class FeatureExtractor {
public:
    FeatureExtractor() = default;

    /// Fixed-seed random-weight extractor (the desk-scale default).
    static FeatureExtractor random(uint64_t seed, int base_channels = 8) {
        FeatureExtractor fe;
        fe.build(base_channels, seed);
        return fe;
    }

    /// Pretrained classification-network features. Requires a checkpoint
    /// converted offline; never silently falls back.
    static FeatureExtractor pretrained(const std::string& path) {
        if (path.empty())
            throw CapabilityError("perceptual loss: pretrained extractor requested but no "
                                  "weights file configured");
        std::ifstream probe(path);
        if (!probe.good())
            throw CapabilityError("perceptual loss: extractor weights not found: " + path);
        probe.close();
        const Archive a = Archive::load(path);
        if (a.meta.get_str("kind", "") != "feature_extractor")
            throw CapabilityError(path + ": archive is not a feature extractor");
        FeatureExtractor fe;
        fe.build(a.meta.get_int("base_channels"), 0);
        restore_params(a, "p", fe.params());
        return fe;
    }

    void save(const std::string& path) const {
        Archive a;
        a.meta.set("kind", std::string("feature_extractor"));
        a.meta.set("base_channels", base_);
        archive_params(a, "p", params());
        a.save(path);
    }

    Var features(const Var& x) const {
        Var h = relu(conv1_(x));
        h = relu(conv2_(h));
        h = avg_pool_op(h, 2);
        h = relu(conv3_(h));
        h = relu(conv4_(h));
        h = avg_pool_op(h, 2);
        h = relu(conv5_(h));
        h = relu(conv6_(h));
        return conv7_(h);
    }

    std::vector<Var> params() const {
        std::vector<Var> out;
        for (const Conv2dLayer* l : {&conv1_, &conv2_, &conv3_, &conv4_, &conv5_, &conv6_, &conv7_})
            l->collect(out);
        return out;
    }
    int base_channels() const { return base_; }

private:
    void build(int base, uint64_t seed) {
        if (base < 1) throw ConfigError("feature extractor: base_channels must be >= 1");
        base_ = base;
        Rng rng(seed);
        conv1_ = Conv2dLayer::make(3, base, 3, 1, rng);
        conv2_ = Conv2dLayer::make(base, base, 3, 1, rng);
        conv3_ = Conv2dLayer::make(base, 2 * base, 3, 1, rng);
        conv4_ = Conv2dLayer::make(2 * base, 2 * base, 3, 1, rng);
        conv5_ = Conv2dLayer::make(2 * base, 4 * base, 3, 1, rng);
        conv6_ = Conv2dLayer::make(4 * base, 4 * base, 3, 1, rng);
        conv7_ = Conv2dLayer::make(4 * base, 4 * base, 3, 1, rng);
        set_trainable(params(), false);
    }
    int base_ = 0;
    Conv2dLayer conv1_, conv2_, conv3_, conv4_, conv5_, conv6_, conv7_;
};

inline double perceptual_loss(const Image& pred, const Image& target,
                              const FeatureExtractor& fe) {
    require_same_shape(pred, target, "perceptual_loss");
    NoGradGuard ng;
    const Var fp = fe.features(make_const(pred));
    const Var ft = fe.features(make_const(target));
    double s = 0.0;
    for (size_t i = 0; i < fp->val.v.size(); ++i) {
        const double d = fp->val.v[i] - ft->val.v[i];
        s += d * d;
    }
    return s / static_cast<double>(fp->val.size());
}

inline Var perceptual_loss_op(const Var& pred, const Tensor& target, const FeatureExtractor& fe) {
    Tensor ft;
    {
        NoGradGuard ng;
        ft = fe.features(make_const(target))->val;
    }
    return mse_loss(fe.features(pred), ft);
}

// ---------------------------------------------------------------------------
// Combined generator objective.
// ---------------------------------------------------------------------------

struct GeneratorLossParts {
    Var total;
    double content = 0.0, perceptual = 0.0, adversarial = 0.0;
};

inline GeneratorLossParts generator_loss(const Var& pred, const Tensor& target,
                                         const Var& disc_scores, const WeightMap& wmap,
                                         const LossConfig& cfg,
                                         const FeatureExtractor* extractor) {
    cfg.validate();
    GeneratorLossParts parts;
    Var total = l1_loss(pred, target);
    parts.content = total->val.v[0];
    if (cfg.alpha > 0.0) {
        if (!extractor)
            throw CapabilityError("generator_loss: perceptual weight > 0 needs an extractor");
        Var lp = perceptual_loss_op(pred, target, *extractor);
        parts.perceptual = lp->val.v[0];
        total = add(total, smul(lp, cfg.alpha));
    }
    if (cfg.beta > 0.0 && disc_scores) {
        Var ladv = defocus_adv_loss_G_op(disc_scores, wmap);
        parts.adversarial = ladv->val.v[0];
        total = add(total, smul(ladv, cfg.beta));
    }
    parts.total = total;
    return parts;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct GanTrainConfig {
    LossConfig loss;
    AnnealSchedule anneal;
    double lr = 2e-4;
    int lr_halflife_epochs = 30;
    int epochs = 90;
    int batch_size = 4;
    long long max_iters = 0;  ///< 0: no cap; otherwise stop after this many steps
    bool use_lp = true;
    bool use_gan = true;
    uint64_t seed = 0;
    DiscriminatorConfig disc;

    void validate() const {
        loss.validate();
        anneal.validate();
        if (!(lr > 0.0)) throw ConfigError("gan: lr must be > 0");
        if (lr_halflife_epochs < 1) throw ConfigError("gan: lr_halflife_epochs must be >= 1");
        if (epochs < 1 || batch_size < 1) throw ConfigError("gan: epochs and batch_size >= 1");
        disc.validate();
    }
    double lr_at_epoch(int epoch) const {
        return lr * std::pow(0.5, (epoch - 1) / lr_halflife_epochs);
    }
};

struct GanIterStats {
    int epoch = 0;
    long long iter = 0;
    double l_c = 0, l_p = 0, l_adv = 0, l_d = 0, gp = 0, guidance = 0, lr = 0;
};

inline std::string gan_history_csv(const std::vector<GanIterStats>& history) {
    std::ostringstream out;
    out << "epoch,iter,L_c,L_p,L_adv,L_D,gp,guidance_weight,lr\n";
    for (const GanIterStats& s : history)
        out << strf("%d,%lld,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n", s.epoch, s.iter, s.l_c, s.l_p,
                    s.l_adv, s.l_d, s.gp, s.guidance, s.lr);
    return out.str();
}

using MapsSource = std::function<DefocusMap(size_t sample_index)>;

/// Alternating 1:1 generator/critic training. `maps_source` supplies the
/// frozen defocus map per sample (estimator output or synthetic GT); maps
/// guide the DGB masks and the defocus weights but receive no gradients.
inline std::vector<GanIterStats> train_defocusgan(const std::vector<SceneSample>& dataset,
                                                  Generator& gen, Discriminator& disc,
                                                  const MapsSource& maps_source,
                                                  const GanTrainConfig& cfg,
                                                  const FeatureExtractor* extractor) {
    cfg.validate();
    if (dataset.empty()) throw DataError("train_defocusgan: empty dataset");
    if (cfg.use_lp && cfg.loss.alpha > 0.0 && !extractor)
        throw CapabilityError("train_defocusgan: perceptual loss enabled but no extractor");

    std::vector<DefocusMap> maps;
    maps.reserve(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) maps.push_back(maps_source(i));

    Adam opt_g(gen.params(), cfg.lr);
    Adam opt_d(disc.params(), cfg.lr);
    Rng gp_rng = Rng(cfg.seed).fork(0x6770);

    std::vector<GanIterStats> history;
    long long iter = 0;
    bool done = false;
    for (int epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
        const double lr = cfg.lr_at_epoch(epoch);
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);
        for (size_t start = 0; start < dataset.size() && !done; start += cfg.batch_size) {
            const size_t end = std::min(dataset.size(), start + cfg.batch_size);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            const double w = guidance_weight(cfg.anneal, iter);

            GanIterStats stats;
            stats.epoch = epoch;
            stats.iter = iter;
            stats.guidance = w;
            stats.lr = lr;

            // Critic step (scores detached from G).
            if (cfg.use_gan && cfg.loss.beta > 0.0) {
                disc.zero_grad();
                double dl = 0.0, gp_total = 0.0;
                for (size_t i = start; i < end; ++i) {
                    const SceneSample& s = dataset[i];
                    Tensor fake;
                    {
                        NoGradGuard ng;
                        fake = gen.forward(s.oof, &maps[i], w)->val;
                    }
                    Discriminator::Cache fake_cache, real_cache;
                    const Tensor fake_scores = disc.forward(fake, &fake_cache);
                    const Tensor real_scores = disc.forward(s.aif, &real_cache);
                    const WeightMap wmap =
                        defocus_weights(maps[i], fake_scores.h, fake_scores.w, cfg.loss.gamma);

                    const double n = static_cast<double>(fake_scores.size());
                    Tensor gfake = wmap.values;
                    for (double& v : gfake.v) v *= inv_b / n;
                    Tensor greal = gfake;
                    for (double& v : greal.v) v = -v;
                    disc.accumulate_param_grads(fake_cache, gfake);
                    disc.accumulate_param_grads(real_cache, greal);

                    const double eps = gp_rng.uniform();
                    Tensor xhat = s.aif;
                    for (size_t j = 0; j < xhat.v.size(); ++j)
                        xhat.v[j] = eps * s.aif.v[j] + (1.0 - eps) * fake.v[j];
                    const double gp = disc.gradient_penalty_sample(
                        xhat, true, cfg.loss.gp_coeff * inv_b);
                    gp_total += gp * inv_b;
                    double wf = 0.0, wr = 0.0;
                    for (size_t j = 0; j < fake_scores.v.size(); ++j) {
                        wf += fake_scores.v[j] * wmap.values.v[j];
                        wr += real_scores.v[j] * wmap.values.v[j];
                    }
                    dl += (wf / n - wr / n) * inv_b;
                }
                stats.gp = gp_total;
                stats.l_d = dl + cfg.loss.gp_coeff * gp_total;
                if (!std::isfinite(stats.l_d))
                    throw NumericError(strf("NaN critic loss at iter %lld (batch starting at "
                                            "sample %zu)", iter, start));
                opt_d.step();
            }

            // Generator step.
            opt_g.zero_grad();
            Var batch_loss;
            double lc = 0.0, lp = 0.0, ladv = 0.0;
            for (size_t i = start; i < end; ++i) {
                const SceneSample& s = dataset[i];
                Var fake = gen.forward(s.oof, &maps[i], w);
                Var scores;
                WeightMap wmap;
                if (cfg.use_gan && cfg.loss.beta > 0.0) {
                    scores = disc_score_op(fake, disc);
                    wmap = defocus_weights(maps[i], scores->val.h, scores->val.w, cfg.loss.gamma);
                }
                LossConfig eff = cfg.loss;
                if (!cfg.use_lp) eff.alpha = 0.0;
                if (!cfg.use_gan) eff.beta = 0.0;
                const GeneratorLossParts parts =
                    generator_loss(fake, s.aif, scores, wmap, eff, extractor);
                lc += parts.content * inv_b;
                lp += parts.perceptual * inv_b;
                ladv += parts.adversarial * inv_b;
                batch_loss = batch_loss ? add(batch_loss, parts.total) : parts.total;
            }
            batch_loss = smul(batch_loss, inv_b);
            if (!std::isfinite(batch_loss->val.v[0]))
                throw NumericError(strf("NaN generator loss at iter %lld (batch starting at "
                                        "sample %zu)", iter, start));
            backward(batch_loss);
            opt_g.step();

            stats.l_c = lc;
            stats.l_p = lp;
            stats.l_adv = ladv;
            history.push_back(stats);
            ++iter;
            if (cfg.max_iters > 0 && iter >= cfg.max_iters) done = true;
        }
    }

    // Once guidance has annealed away the network must run map-free.
    {
        NoGradGuard ng;
        const Var check = gen.forward(dataset.front().oof, nullptr, 0.0);
        if (!check->val.finite())
            throw NumericError("map-free validation forward produced non-finite values");
    }
    return history;
}

}  // namespace dfl
