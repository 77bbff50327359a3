// Generates a two-plane synthetic scene, estimates its defocus map with the
// brute-force oracle, and reports per-plane accuracy plus the two-stage
// deconvolution improvement.

#include <cstdio>

#include "dfl/defocus_estimation.hpp"
#include "dfl/metrics.hpp"
#include "dfl/wiener.hpp"

using namespace dfl;

int main() {
    const KernelBank bank = init_bank(10);

    SceneSpec spec;
    spec.width = 96;
    spec.height = 96;
    spec.texture = "checker";
    spec.depth_layout = "coc:0,8";
    spec.seed = 42;
    const SceneSample scene = generate_scene(spec, bank);
    export_scene(scene, ".");
    std::printf("scene exported (aif/oof/dp views + gt_map.pfm)\n");

    const DefocusMap est = oracle_estimate_map(scene.aif, scene.oof, bank, 9);
    export_map(est, "oracle_map");
    long correct = 0, total = 0;
    for (int y = 10; y < 86; ++y)
        for (int x = 10; x < 86; ++x) {
            if (std::abs(x - 48) <= 10) continue;
            ++total;
            if (est.values.at(y, x) == scene.gt_map->values.at(y, x)) ++correct;
        }
    std::printf("oracle map accuracy away from seam/borders: %.1f%%\n", 100.0 * correct / total);

    WienerConfig wc;
    wc.nsr = 1e-2;
    const Image restored = two_stage_deblur(scene.oof, *scene.gt_map, bank, wc);
    std::printf("psnr blurred  : %.2f dB\n", psnr(clamp01(scene.oof), scene.aif));
    std::printf("psnr two-stage: %.2f dB\n", psnr(clamp01(restored), scene.aif));
    return 0;
}
