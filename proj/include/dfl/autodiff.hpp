#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "dfl/conv_ops.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// A small dynamic tape. Every op builds a Node holding its value, the parent
// links and a closure that pushes gradients backwards. Graphs are rebuilt
// per forward pass; parameters are long-lived leaf nodes.
// ---------------------------------------------------------------------------

class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor val;
    Tensor grad;  // lazily allocated to val's shape
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;

    Tensor& g() {
        if (grad.empty()) grad = Tensor(val.n, val.c, val.h, val.w);
        return grad;
    }
    void zero_grad() {
        if (!grad.empty()) grad.zero();
    }
};

inline Var make_const(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    return n;
}

inline Var make_param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = true;
    return n;
}

/// Gradient recording switch. Inside a NoGradGuard, ops drop their parent
/// links so intermediate activations free as soon as they go out of scope.
inline bool& grad_enabled() {
    static thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (!grad_enabled()) return n;
    n->parents = std::move(parents);
    for (const Var& p : n->parents)
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return n;
}

/// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
    if (root->val.size() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen{root.get()};
    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }
    root->g().v[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

inline Var detach(const Var& x) { return make_const(x->val); }

// ---------------------------------------------------------------------------
// Elementwise and structural ops.
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "add");
    Tensor y = a->val;
    y += b->val;
    return make_op(std::move(y), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->g() += n.grad;
        if (n.parents[1]->requires_grad) n.parents[1]->g() += n.grad;
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "sub");
    Tensor y = a->val;
    y -= b->val;
    return make_op(std::move(y), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->g() += n.grad;
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->g();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] -= n.grad.v[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "mul");
    Tensor y = a->val;
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] *= b->val.v[i];
    return make_op(std::move(y), {a, b}, [](Node& n) {
        const Tensor& av = n.parents[0]->val;
        const Tensor& bv = n.parents[1]->val;
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->g();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] * bv.v[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->g();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] * av.v[i];
        }
    });
}

/// Multiply by a constant mask/tensor (no gradient into the mask).
inline Var mul_const(const Var& a, Tensor mask) {
    require_same_shape(a->val, mask, "mul_const");
    Tensor y = a->val;
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] *= mask.v[i];
    auto m = std::make_shared<Tensor>(std::move(mask));
    return make_op(std::move(y), {a}, [m](Node& n) {
        Tensor& g = n.parents[0]->g();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] * m->v[i];
    });
}

inline Var smul(const Var& a, double s) {
    Tensor y = a->val;
    y *= s;
    return make_op(std::move(y), {a}, [s](Node& n) {
        Tensor& g = n.parents[0]->g();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += s * n.grad.v[i];
    });
}

inline Var add_const(const Var& a, const Tensor& t) {
    require_same_shape(a->val, t, "add_const");
    Tensor y = a->val;
    y += t;
    return make_op(std::move(y), {a}, [](Node& n) { n.parents[0]->g() += n.grad; });
}

inline Var leaky_relu(const Var& x, double slope = 0.2) {
    Tensor y = x->val;
    for (double& v : y.v)
        if (v < 0.0) v *= slope;
    return make_op(std::move(y), {x}, [slope](Node& n) {
        const Tensor& xv = n.parents[0]->val;
        Tensor& g = n.parents[0]->g();
        for (size_t i = 0; i < g.v.size(); ++i)
            g.v[i] += n.grad.v[i] * (xv.v[i] > 0.0 ? 1.0 : slope);
    });
}

inline Var relu(const Var& x) { return leaky_relu(x, 0.0); }

inline Var sigmoid(const Var& x) {
    Tensor y = x->val;
    for (double& v : y.v) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(std::move(y), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->g();
        for (size_t i = 0; i < g.v.size(); ++i) {
            const double s = n.val.v[i];
            g.v[i] += n.grad.v[i] * s * (1.0 - s);
        }
    });
}

inline Var concat_channels(const Var& a, const Var& b) {
    if (a->val.h != b->val.h || a->val.w != b->val.w)
        throw ShapeError("concat_channels: spatial sizes differ");
    Tensor y(1, a->val.c + b->val.c, a->val.h, a->val.w);
    std::copy(a->val.v.begin(), a->val.v.end(), y.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), y.v.begin() + a->val.v.size());
    return make_op(std::move(y), {a, b}, [](Node& n) {
        const size_t na = n.parents[0]->val.v.size();
        if (n.parents[0]->requires_grad) {
            Tensor& g = n.parents[0]->g();
            for (size_t i = 0; i < na; ++i) g.v[i] += n.grad.v[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->g();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[na + i];
        }
    });
}

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = -1) {
    if (pad < 0) pad = w->val.w / 2;
    std::vector<double> bias(b->val.v.begin(), b->val.v.end());
    Tensor y = conv2d_fwd(x->val, w->val, bias, stride, pad);
    return make_op(std::move(y), {x, w, b}, [stride, pad](Node& n) {
        const Var& x = n.parents[0];
        const Var& w = n.parents[1];
        const Var& b = n.parents[2];
        if (x->requires_grad)
            x->g() += conv2d_dgrad(n.grad, w->val, stride, pad, x->val.h, x->val.w);
        if (w->requires_grad || b->requires_grad) {
            Tensor gw(w->val.n, w->val.c, w->val.h, w->val.w);
            std::vector<double> gb(b->val.v.size(), 0.0);
            conv2d_wgrad(x->val, n.grad, stride, pad, gw, gb);
            if (w->requires_grad) w->g() += gw;
            if (b->requires_grad) {
                Tensor& g = b->g();
                for (size_t i = 0; i < gb.size(); ++i) g.v[i] += gb[i];
            }
        }
    });
}

inline Var avg_pool_op(const Var& x, int f) {
    Tensor y = avg_pool(x->val, f);
    return make_op(std::move(y), {x}, [f](Node& n) {
        n.parents[0]->g() += avg_pool_backward(n.grad, f, n.parents[0]->val.h, n.parents[0]->val.w);
    });
}

inline Var bilinear_up_op(const Var& x, int f) {
    Tensor y = bilinear_upsample(x->val, f);
    return make_op(std::move(y), {x}, [f](Node& n) {
        n.parents[0]->g() +=
            bilinear_upsample_backward(n.grad, f, n.parents[0]->val.h, n.parents[0]->val.w);
    });
}

/// Global average pool to (1, C, 1, 1).
inline Var global_avg_pool(const Var& x) {
    Tensor y(1, x->val.c, 1, 1);
    const double inv = 1.0 / (x->val.h * x->val.w);
    for (int c = 0; c < x->val.c; ++c) {
        double s = 0.0;
        for (int yy = 0; yy < x->val.h; ++yy) {
            const double* r = x->val.row(c, yy);
            for (int xx = 0; xx < x->val.w; ++xx) s += r[xx];
        }
        y.v[c] = s * inv;
    }
    return make_op(std::move(y), {x}, [inv](Node& n) {
        Tensor& g = n.parents[0]->g();
        for (int c = 0; c < g.c; ++c) {
            const double gc = n.grad.v[c] * inv;
            for (int yy = 0; yy < g.h; ++yy) {
                double* r = g.row(c, yy);
                for (int xx = 0; xx < g.w; ++xx) r[xx] += gc;
            }
        }
    });
}

/// x (1,C,H,W) scaled per channel by s (1,C,1,1).
inline Var scale_channels(const Var& x, const Var& s) {
    if (s->val.c != x->val.c || s->val.h != 1 || s->val.w != 1)
        throw ShapeError("scale_channels: scale must be (1,C,1,1)");
    Tensor y = x->val;
    for (int c = 0; c < y.c; ++c) {
        const double sc = s->val.v[c];
        for (int yy = 0; yy < y.h; ++yy) {
            double* r = y.row(c, yy);
            for (int xx = 0; xx < y.w; ++xx) r[xx] *= sc;
        }
    }
    return make_op(std::move(y), {x, s}, [](Node& n) {
        const Var& x = n.parents[0];
        const Var& s = n.parents[1];
        if (x->requires_grad) {
            Tensor& g = x->g();
            for (int c = 0; c < g.c; ++c) {
                const double sc = s->val.v[c];
                for (int yy = 0; yy < g.h; ++yy) {
                    double* gr = g.row(c, yy);
                    const double* nr = n.grad.row(c, yy);
                    for (int xx = 0; xx < g.w; ++xx) gr[xx] += sc * nr[xx];
                }
            }
        }
        if (s->requires_grad) {
            Tensor& g = s->g();
            for (int c = 0; c < g.c; ++c) {
                double acc = 0.0;
                for (int yy = 0; yy < x->val.h; ++yy) {
                    const double* xr = x->val.row(c, yy);
                    const double* nr = n.grad.row(c, yy);
                    for (int xx = 0; xx < x->val.w; ++xx) acc += xr[xx] * nr[xx];
                }
                g.v[c] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions (scalar outputs).
// ---------------------------------------------------------------------------

inline Var mean_all(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x->val.size());
    Tensor y = Tensor::scalar(x->val.sum() * inv);
    return make_op(std::move(y), {x}, [inv](Node& n) {
        Tensor& g = n.parents[0]->g();
        const double gs = n.grad.v[0] * inv;
        for (double& v : g.v) v += gs;
    });
}

/// Mean absolute difference against a constant target.
inline Var l1_loss(const Var& x, const Tensor& target) {
    require_same_shape(x->val, target, "l1_loss");
    const double inv = 1.0 / static_cast<double>(x->val.size());
    double s = 0.0;
    for (size_t i = 0; i < x->val.v.size(); ++i) s += std::abs(x->val.v[i] - target.v[i]);
    auto t = std::make_shared<Tensor>(target);
    return make_op(Tensor::scalar(s * inv), {x}, [inv, t](Node& n) {
        Tensor& g = n.parents[0]->g();
        const Tensor& xv = n.parents[0]->val;
        const double gs = n.grad.v[0] * inv;
        for (size_t i = 0; i < g.v.size(); ++i) {
            const double d = xv.v[i] - t->v[i];
            g.v[i] += gs * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
    });
}

/// Mean squared difference against a constant target.
inline Var mse_loss(const Var& x, const Tensor& target) {
    require_same_shape(x->val, target, "mse_loss");
    const double inv = 1.0 / static_cast<double>(x->val.size());
    double s = 0.0;
    for (size_t i = 0; i < x->val.v.size(); ++i) {
        const double d = x->val.v[i] - target.v[i];
        s += d * d;
    }
    auto t = std::make_shared<Tensor>(target);
    return make_op(Tensor::scalar(s * inv), {x}, [inv, t](Node& n) {
        Tensor& g = n.parents[0]->g();
        const Tensor& xv = n.parents[0]->val;
        const double gs = n.grad.v[0] * inv * 2.0;
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += gs * (xv.v[i] - t->v[i]);
    });
}

/// Mean of weights ⊙ x (weights constant).
inline Var weighted_mean(const Var& x, const Tensor& weights) {
    require_same_shape(x->val, weights, "weighted_mean");
    const double inv = 1.0 / static_cast<double>(x->val.size());
    double s = 0.0;
    for (size_t i = 0; i < x->val.v.size(); ++i) s += x->val.v[i] * weights.v[i];
    auto wt = std::make_shared<Tensor>(weights);
    return make_op(Tensor::scalar(s * inv), {x}, [inv, wt](Node& n) {
        Tensor& g = n.parents[0]->g();
        const double gs = n.grad.v[0] * inv;
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += gs * wt->v[i];
    });
}

/// Mean L1 norm of the forward-difference gradient (horizontal + vertical),
/// zero-padded at the far edges; the defocus-map smoothness prior.
inline Var grad_l1_prior(const Var& x) {
    const Tensor& v = x->val;
    const double inv = 1.0 / static_cast<double>(v.size());
    double s = 0.0;
    for (int c = 0; c < v.c; ++c)
        for (int y = 0; y < v.h; ++y)
            for (int xx = 0; xx < v.w; ++xx) {
                if (xx + 1 < v.w) s += std::abs(v.at(c, y, xx + 1) - v.at(c, y, xx));
                if (y + 1 < v.h) s += std::abs(v.at(c, y + 1, xx) - v.at(c, y, xx));
            }
    return make_op(Tensor::scalar(s * inv), {x}, [inv](Node& n) {
        const Tensor& v = n.parents[0]->val;
        Tensor& g = n.parents[0]->g();
        const double gs = n.grad.v[0] * inv;
        auto sgn = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
        for (int c = 0; c < v.c; ++c)
            for (int y = 0; y < v.h; ++y)
                for (int xx = 0; xx < v.w; ++xx) {
                    if (xx + 1 < v.w) {
                        const double d = sgn(v.at(c, y, xx + 1) - v.at(c, y, xx)) * gs;
                        g.at(c, y, xx + 1) += d;
                        g.at(c, y, xx) -= d;
                    }
                    if (y + 1 < v.h) {
                        const double d = sgn(v.at(c, y + 1, xx) - v.at(c, y, xx)) * gs;
                        g.at(c, y + 1, xx) += d;
                        g.at(c, y, xx) -= d;
                    }
                }
    });
}

}  // namespace dfl
