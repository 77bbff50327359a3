#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "dfl/nn.hpp"

using namespace dfl;

namespace {

Tensor random_tensor(int n, int c, int h, int w, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(n, c, h, w);
    for (double& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

/// Max relative error between analytic gradients and central differences
/// over every element of every listed parameter.
double fd_max_rel_err(const std::function<Var()>& build, const std::vector<Var>& params,
                      double h = 1e-6) {
    for (const Var& p : params) p->zero_grad();
    Var loss = build();
    backward(loss);
    double worst = 0.0;
    for (const Var& p : params) {
        REQUIRE(!p->grad.empty());
        for (size_t i = 0; i < p->val.v.size(); ++i) {
            const double keep = p->val.v[i];
            p->val.v[i] = keep + h;
            const double up = build()->val.v[0];
            p->val.v[i] = keep - h;
            const double dn = build()->val.v[0];
            p->val.v[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = p->grad.v[i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("conv2d forward matches a direct loop") {
    Rng rng(1);
    const Tensor x = random_tensor(1, 2, 5, 6, rng);
    const Tensor w = random_tensor(3, 2, 3, 3, rng);
    std::vector<double> b = {0.1, -0.2, 0.3};
    const Tensor y = conv2d_fwd(x, w, b, 1, 1);
    REQUIRE(y.c == 3);
    REQUIRE(y.h == 5);
    REQUIRE(y.w == 6);
    for (int o = 0; o < 3; ++o)
        for (int oy = 0; oy < 5; ++oy)
            for (int ox = 0; ox < 6; ++ox) {
                double want = b[o];
                for (int ic = 0; ic < 2; ++ic)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy + ky - 1, ix = ox + kx - 1;
                            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                            want += w.at(o, ic, ky, kx) * x.at(ic, iy, ix);
                        }
                CHECK(std::abs(y.at(o, oy, ox) - want) < 1e-12);
            }
}

TEST_CASE("conv2d stride-2 output shape") {
    Rng rng(2);
    const Tensor x = random_tensor(1, 1, 8, 8, rng);
    const Tensor w = random_tensor(4, 1, 4, 4, rng);
    const Tensor y = conv2d_fwd(x, w, {}, 2, 1);
    CHECK(y.c == 4);
    CHECK(y.h == 4);
    CHECK(y.w == 4);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(3);
    Var x = make_param(random_tensor(1, 2, 6, 5, rng));
    Var w = make_param(random_tensor(3, 2, 3, 3, rng, -0.5, 0.5));
    Var b = make_param(random_tensor(1, 3, 1, 1, rng, -0.1, 0.1));
    const Tensor target = random_tensor(1, 3, 6, 5, rng);
    auto build = [&] { return mse_loss(conv2d(x, w, b, 1, 1), target); };
    CHECK(fd_max_rel_err(build, {x, w, b}) < 1e-6);
}

TEST_CASE("strided conv gradients match finite differences") {
    Rng rng(4);
    Var x = make_param(random_tensor(1, 2, 8, 8, rng));
    Var w = make_param(random_tensor(2, 2, 4, 4, rng, -0.5, 0.5));
    Var b = make_param(random_tensor(1, 2, 1, 1, rng, -0.1, 0.1));
    const Tensor target = random_tensor(1, 2, 4, 4, rng);
    auto build = [&] { return mse_loss(conv2d(x, w, b, 2, 1), target); };
    CHECK(fd_max_rel_err(build, {x, w, b}) < 1e-6);
}

TEST_CASE("activation and structural op gradients") {
    Rng rng(5);
    Var x = make_param(random_tensor(1, 3, 4, 4, rng));
    Var ybase = make_param(random_tensor(1, 3, 4, 4, rng));
    const Tensor target = random_tensor(1, 3, 4, 4, rng);
    const Tensor target2 = random_tensor(1, 6, 4, 4, rng);
    const Tensor target_up = random_tensor(1, 3, 8, 8, rng);

    CHECK(fd_max_rel_err([&] { return mse_loss(leaky_relu(x, 0.2), target); }, {x}) < 1e-5);
    CHECK(fd_max_rel_err([&] { return mse_loss(sigmoid(x), target); }, {x}) < 1e-6);
    CHECK(fd_max_rel_err([&] { return mse_loss(add(x, ybase), target); }, {x, ybase}) < 1e-6);
    CHECK(fd_max_rel_err([&] { return mse_loss(sub(x, ybase), target); }, {x, ybase}) < 1e-6);
    CHECK(fd_max_rel_err([&] { return mse_loss(mul(x, ybase), target); }, {x, ybase}) < 1e-6);
    CHECK(fd_max_rel_err([&] { return mse_loss(concat_channels(x, ybase), target2); },
                         {x, ybase}) < 1e-6);
    CHECK(fd_max_rel_err([&] { return mse_loss(bilinear_up_op(x, 2), target_up); }, {x}) < 1e-6);
    CHECK(fd_max_rel_err([&] { return smul(mean_all(global_avg_pool(x)), 3.0); }, {x}) < 1e-6);

    Var big = make_param(random_tensor(1, 2, 8, 8, rng));
    const Tensor target_dn = random_tensor(1, 2, 4, 4, rng);
    CHECK(fd_max_rel_err([&] { return mse_loss(avg_pool_op(big, 2), target_dn); }, {big}) < 1e-6);

    Var scale = make_param(random_tensor(1, 3, 1, 1, rng, 0.2, 0.9));
    CHECK(fd_max_rel_err([&] { return mse_loss(scale_channels(x, scale), target); }, {x, scale}) <
          1e-6);
}

TEST_CASE("loss reductions match independent computations") {
    Rng rng(6);
    const Tensor a = random_tensor(1, 3, 5, 7, rng);
    const Tensor b = random_tensor(1, 3, 5, 7, rng);
    Var av = make_const(a);

    double l1 = 0.0, l2 = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        l1 += std::abs(a.v[i] - b.v[i]);
        l2 += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
    }
    l1 /= a.v.size();
    l2 /= a.v.size();
    CHECK(l1_loss(av, b)->val.v[0] == Catch::Approx(l1).epsilon(1e-12));
    CHECK(mse_loss(av, b)->val.v[0] == Catch::Approx(l2).epsilon(1e-12));

    Tensor w = random_tensor(1, 3, 5, 7, rng, 0.0, 2.0);
    double wm = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) wm += a.v[i] * w.v[i];
    wm /= a.v.size();
    CHECK(weighted_mean(av, w)->val.v[0] == Catch::Approx(wm).epsilon(1e-12));
}

TEST_CASE("l1 and prior gradients match finite differences away from kinks") {
    Rng rng(7);
    // Values spaced so no |.| argument sits near zero.
    Tensor base(1, 1, 6, 6);
    for (size_t i = 0; i < base.v.size(); ++i) base.v[i] = 0.37 * (i % 7) + 0.11 * (i % 3) + 0.05;
    Var x = make_param(base);
    Tensor target(1, 1, 6, 6, -2.0);
    // Both losses are piecewise linear, so a generous step keeps central
    // differences exact while avoiding cancellation noise.
    CHECK(fd_max_rel_err([&] { return l1_loss(x, target); }, {x}, 1e-3) < 1e-6);
    CHECK(fd_max_rel_err([&] { return grad_l1_prior(x); }, {x}, 1e-3) < 1e-6);
}

TEST_CASE("backward accumulates when a node feeds two consumers") {
    Var x = make_param(Tensor::scalar(3.0));
    Var y = add(mul(x, x), smul(x, 2.0));  // x^2 + 2x, dy/dx = 2x + 2 = 8
    backward(y);
    CHECK(x->grad.v[0] == Catch::Approx(8.0));
}

TEST_CASE("detach blocks gradient flow") {
    Var x = make_param(Tensor::scalar(2.0));
    Var y = mul(detach(x), x);  // treated as const * x
    backward(mean_all(y));
    CHECK(x->grad.v[0] == Catch::Approx(2.0));
}

TEST_CASE("Adam leaves parameters with no gradient bitwise unchanged") {
    Rng rng(8);
    Var a = make_param(random_tensor(1, 1, 3, 3, rng));
    Var b = make_param(random_tensor(1, 1, 3, 3, rng));
    const Tensor b_before = b->val;
    Adam opt({a, b}, 1e-2);
    for (int i = 0; i < 5; ++i) {
        opt.zero_grad();
        Var loss = mse_loss(a, Tensor(1, 1, 3, 3, 1.0));
        backward(loss);
        opt.step();
    }
    CHECK(max_abs_diff(b->val, b_before) == 0.0);
    CHECK(max_abs_diff(a->val, b_before) != 0.0);
}

TEST_CASE("Adam drives a quadratic toward its minimum") {
    Var x = make_param(Tensor::scalar(4.0));
    Adam opt({x}, 0.1);
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        backward(mse_loss(x, Tensor::scalar(1.5)));
        opt.step();
    }
    CHECK(std::abs(x->val.v[0] - 1.5) < 1e-3);
}

TEST_CASE("two seeds give different layer initializations") {
    Rng r1(100), r2(101);
    const Conv2dLayer l1 = Conv2dLayer::make(3, 4, 3, 1, r1);
    const Conv2dLayer l2 = Conv2dLayer::make(3, 4, 3, 1, r2);
    CHECK(max_abs_diff(l1.w->val, l2.w->val) > 0.0);
}

TEST_CASE("parameter archive round trip") {
    Rng rng(9);
    const Conv2dLayer layer = Conv2dLayer::make(2, 3, 3, 1, rng);
    std::vector<Var> params;
    layer.collect(params);
    Archive a;
    a.meta.set("kind", std::string("test"));
    archive_params(a, "p", params);
    a.save("params_roundtrip.ckpt");
    const Archive back = Archive::load("params_roundtrip.ckpt");
    Rng rng2(10);
    const Conv2dLayer other = Conv2dLayer::make(2, 3, 3, 1, rng2);
    std::vector<Var> params2;
    other.collect(params2);
    restore_params(back, "p", params2);
    CHECK(max_abs_diff(params2[0]->val, params[0]->val) < 1e-7);
    std::remove("params_roundtrip.ckpt");
}
