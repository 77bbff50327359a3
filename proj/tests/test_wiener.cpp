#include <catch2/catch_amalgamated.hpp>

#include "dfl/metrics.hpp"
#include "dfl/wiener.hpp"

using namespace dfl;

namespace {

/// Smooth low-frequency test image (easy to deconvolve without noise).
Image smooth_image(int h, int w) {
    Image img(1, 3, h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(c, y, x) = 0.5 + 0.2 * std::sin(2.0 * M_PI * (x + 3.0 * c) / w) *
                                            std::cos(2.0 * M_PI * y / h) +
                                  0.15 * std::sin(2.0 * M_PI * (x + y) / (h + w));
    return img;
}

double interior_psnr(const Image& a, const Image& b, int margin) {
    double se = 0.0;
    long n = 0;
    for (int c = 0; c < a.c; ++c)
        for (int y = margin; y < a.h - margin; ++y)
            for (int x = margin; x < a.w - margin; ++x) {
                const double d = a.at(c, y, x) - b.at(c, y, x);
                se += d * d;
                ++n;
            }
    const double mse = se / n;
    return mse <= 0.0 ? 100.0 : -10.0 * std::log10(mse);
}

}  // namespace

TEST_CASE("wiener: delta kernel with zero nsr is the identity") {
    const Image img = smooth_image(32, 32);
    Tensor delta = Tensor::grid(1, 1, 1.0);
    WienerConfig cfg;
    cfg.nsr = 0.0;
    CHECK(max_abs_diff(wiener_deconv(img, delta, cfg), img) < 1e-5);
}

TEST_CASE("wiener: blur round trip recovers the interior above 40 dB") {
    const KernelBank bank = init_bank(6);
    const Image img = smooth_image(96, 96);
    const Image blurred = reblur(img, DefocusMap::constant(96, 96, 6, 6), bank);
    WienerConfig cfg;
    cfg.nsr = 1e-6;
    const Image restored = wiener_deconv(blurred, lookup(bank, 6), cfg);
    CHECK(interior_psnr(restored, img, 16) >= 40.0);
}

TEST_CASE("wiener: huge nsr attenuates the output energy") {
    const Image img = smooth_image(32, 32);
    const KernelBank bank = init_bank(4);
    WienerConfig cfg;
    cfg.nsr = 1e6;
    const Image out = wiener_deconv(img, lookup(bank, 3), cfg);
    double ein = 0.0, eout = 0.0;
    for (size_t i = 0; i < img.v.size(); ++i) {
        ein += img.v[i] * img.v[i];
        eout += out.v[i] * out.v[i];
    }
    CHECK(eout < 0.01 * ein);
}

TEST_CASE("wiener is linear in the image argument") {
    const KernelBank bank = init_bank(5);
    const Image a = smooth_image(40, 40);
    Image b = smooth_image(40, 40);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x) {
            b.at(0, y, x) = 0.3 + 0.4 * ((x * 13 + y * 7) % 11) / 11.0;
            b.at(1, y, x) = 0.6 - 0.2 * ((x * 5 + y * 3) % 7) / 7.0;
            b.at(2, y, x) = 0.5;
        }
    WienerConfig cfg;
    cfg.nsr = 1e-3;
    const double s = 0.7, t = 0.25;
    Image mix = a;
    for (size_t i = 0; i < mix.v.size(); ++i) mix.v[i] = s * a.v[i] + t * b.v[i];
    const Image da = wiener_deconv(a, lookup(bank, 4), cfg);
    const Image db = wiener_deconv(b, lookup(bank, 4), cfg);
    const Image dmix = wiener_deconv(mix, lookup(bank, 4), cfg);
    Image expect = da;
    for (size_t i = 0; i < expect.v.size(); ++i) expect.v[i] = s * da.v[i] + t * db.v[i];
    CHECK(max_abs_diff(dmix, expect) < 1e-5);
}

TEST_CASE("wiener input validation") {
    const Image img = smooth_image(16, 16);
    WienerConfig cfg;
    Tensor big = Tensor::grid(21, 21, 1.0 / (21 * 21));
    CHECK_THROWS_AS(wiener_deconv(img, big, cfg), RangeError);
    Tensor unnormalized = Tensor::grid(3, 3, 1.0);
    CHECK_THROWS_AS(wiener_deconv(img, unnormalized, cfg), ConfigError);
    WienerConfig bad;
    bad.nsr = -1.0;
    CHECK_THROWS_AS(wiener_deconv(img, Tensor::grid(1, 1, 1.0), bad), ConfigError);
}

TEST_CASE("two-stage: zero map passes the input through for any nsr") {
    const KernelBank bank = init_bank(4);
    const Image img = smooth_image(24, 24);
    for (double nsr : {0.0, 1e-2, 10.0}) {
        WienerConfig cfg;
        cfg.nsr = nsr;
        const Image out = two_stage_deblur(img, DefocusMap::constant(24, 24, 0.0, 4), bank, cfg);
        CHECK(max_abs_diff(out, img) == 0.0);
    }
}

TEST_CASE("two-stage: constant-blur scene improves at least 3 dB with the true bank") {
    const KernelBank bank = init_bank(6);
    SceneSpec spec;
    spec.width = 96;
    spec.height = 96;
    spec.texture = "checker";
    spec.depth_layout = "coc:6";
    spec.seed = 3;
    const SceneSample s = generate_scene(spec, bank);
    WienerConfig cfg;
    cfg.nsr = 1e-2;
    const Image restored = two_stage_deblur(s.oof, *s.gt_map, bank, cfg);
    const double before = interior_psnr(s.oof, s.aif, 16);
    const double after = interior_psnr(restored, s.aif, 16);
    CHECK(after - before >= 3.0);
}

TEST_CASE("two-stage: generating bank beats a mismatched Gaussian bank") {
    // Directional kernel-quality comparison: deconvolving with the kernels
    // that produced the blur must beat deconvolving with a Gaussian family.
    const KernelBank bank = init_bank(6);
    const KernelBank gauss = make_gaussian_bank(6);
    const Image img = smooth_image(96, 96);
    DefocusMap map{Tensor::grid(96, 96), 6.0};
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x) map.values.at(y, x) = x < 48 ? 0.0 : 6.0;
    const Image blurred = reblur(img, map, bank);
    WienerConfig cfg;
    cfg.nsr = 1e-2;
    const Image with_true = two_stage_deblur(blurred, map, bank, cfg);
    const Image with_gauss = two_stage_deblur(blurred, map, gauss, cfg);
    CHECK(interior_psnr(with_true, img, 16) > interior_psnr(with_gauss, img, 16));
}

TEST_CASE("two-stage: interior brightness is preserved within 2 percent") {
    const KernelBank bank = init_bank(5);
    const Image img = smooth_image(80, 80);
    const DefocusMap map = DefocusMap::constant(80, 80, 5, 5);
    const Image blurred = reblur(img, map, bank);
    WienerConfig cfg;
    const Image restored = two_stage_deblur(blurred, map, bank, cfg);
    double mi = 0.0, mr = 0.0;
    long n = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 10; y < 70; ++y)
            for (int x = 10; x < 70; ++x) {
                mi += img.at(c, y, x);
                mr += restored.at(c, y, x);
                ++n;
            }
    CHECK(std::abs(mr / n - mi / n) / (mi / n) < 0.02);
}
