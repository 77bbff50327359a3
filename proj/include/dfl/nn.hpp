#pragma once

#include "dfl/autodiff.hpp"
#include "dfl/checkpoint.hpp"
#include "dfl/rng.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Layer building blocks over the tape, plus Adam.
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    Var w, b;
    int stride = 1;
    int pad = -1;  // -1: same padding for stride 1

    static Conv2dLayer make(int in_ch, int out_ch, int k, int stride, Rng& rng) {
        Conv2dLayer layer;
        Tensor wt(out_ch, in_ch, k, k);
        const double std = std::sqrt(2.0 / (in_ch * k * k));
        for (double& v : wt.v) v = rng.normal(0.0, std);
        layer.w = make_param(std::move(wt));
        layer.b = make_param(Tensor(1, out_ch, 1, 1));
        layer.stride = stride;
        layer.pad = k / 2;
        return layer;
    }

    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }

    void collect(std::vector<Var>& out) const {
        out.push_back(w);
        out.push_back(b);
    }
    void set_trainable(bool on) const {
        w->requires_grad = on;
        b->requires_grad = on;
    }
};

inline void set_trainable(const std::vector<Var>& params, bool on) {
    for (const Var& p : params) p->requires_grad = on;
}

inline void zero_grads(const std::vector<Var>& params) {
    for (const Var& p : params) p->zero_grad();
}

inline double grad_norm(const std::vector<Var>& params) {
    double s = 0.0;
    for (const Var& p : params)
        if (!p->grad.empty())
            for (double v : p->grad.v) s += v * v;
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Adam (b1 = 0.9, b2 = 0.999). Parameters with empty gradients are skipped,
// so frozen sub-modules keep their state bitwise intact.
// ---------------------------------------------------------------------------

class Adam {
public:
    explicit Adam(std::vector<Var> params, double lr, double b1 = 0.9, double b2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const Var& p : params_) {
            m_.emplace_back(p->val.n, p->val.c, p->val.h, p->val.w);
            v_.emplace_back(p->val.n, p->val.c, p->val.h, p->val.w);
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    const std::vector<Var>& params() const { return params_; }

    void zero_grad() { zero_grads(params_); }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Node& p = *params_[i];
            if (p.grad.empty()) continue;
            for (size_t j = 0; j < p.val.v.size(); ++j) {
                const double g = p.grad.v[j];
                if (!std::isfinite(g)) throw NumericError("non-finite gradient in Adam step");
                double& m = m_[i].v[j];
                double& v = v_[i].v[j];
                m = b1_ * m + (1.0 - b1_) * g;
                v = b2_ * v + (1.0 - b2_) * g * g;
                p.val.v[j] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
            }
        }
    }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, b1_, b2_, eps_;
    long long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint helpers for parameter lists.
// ---------------------------------------------------------------------------

inline void archive_params(Archive& a, const std::string& prefix, const std::vector<Var>& params) {
    for (size_t i = 0; i < params.size(); ++i)
        a.add(prefix + std::to_string(i), params[i]->val);
}

inline void restore_params(const Archive& a, const std::string& prefix,
                           const std::vector<Var>& params) {
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = a.tensor(prefix + std::to_string(i));
        if (!t.same_shape(params[i]->val))
            throw DataError(strf("checkpoint tensor %s%zu has shape %s, expected %s",
                                 prefix.c_str(), i, t.shape_str().c_str(),
                                 params[i]->val.shape_str().c_str()));
        params[i]->val = t;
    }
}

}  // namespace dfl
