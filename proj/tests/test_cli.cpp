#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dfl/metrics.hpp"
#include "dfl/reblur.hpp"

using namespace dfl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args, const fs::path& cwd, const std::string& log = "cli_log.txt") {
    const std::string cmd = "cd " + cwd.string() + " && " + std::string(DFL_CLI_PATH) + " " +
                            args + " > " + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_cfg(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

}  // namespace

TEST_CASE("cli: synth writes scenes, layout and a manifest; reruns are byte-identical") {
    TempDir tmp("dfl_cli_synth");
    write_cfg(tmp.path / "synth.cfg", "count = 4\nc_max = 6\ndepth_layout = coc:0,4\nsize = 32x32\n");
    REQUIRE(run("synth --config synth.cfg --out d1 --seed 7 --deterministic", tmp.path) == 0);
    for (const char* f : {"aif.png", "oof.png", "dp_l.png", "dp_r.png", "gt_map.pfm"})
        CHECK(fs::exists(tmp.path / "d1" / "scene_0000" / f));
    CHECK(fs::exists(tmp.path / "d1" / "layout.cfg"));
    CHECK(fs::exists(tmp.path / "d1" / "resolved_config.cfg"));

    REQUIRE(run("synth --config synth.cfg --out d2 --seed 7 --deterministic", tmp.path) == 0);
    CHECK(slurp(tmp.path / "d1" / "manifest.cfg") == slurp(tmp.path / "d2" / "manifest.cfg"));
    CHECK(slurp(tmp.path / "d1" / "scene_0002" / "oof.png") ==
          slurp(tmp.path / "d2" / "scene_0002" / "oof.png"));
    CHECK(slurp(tmp.path / "d1" / "scene_0001" / "gt_map.pfm") ==
          slurp(tmp.path / "d2" / "scene_0001" / "gt_map.pfm"));

    // A different seed changes the content.
    REQUIRE(run("synth --config synth.cfg --out d3 --seed 8", tmp.path) == 0);
    CHECK(slurp(tmp.path / "d1" / "manifest.cfg") != slurp(tmp.path / "d3" / "manifest.cfg"));
}

TEST_CASE("cli: synth surfaces out-of-range CoC with the scene id") {
    TempDir tmp("dfl_cli_synth_bad");
    write_cfg(tmp.path / "bad.cfg", "count = 1\nc_max = 6\ndepth_layout = coc:0,9\n");
    const int code = run("synth --config bad.cfg --out d", tmp.path, "err.txt");
    CHECK(code == 2);
    const std::string log = slurp(tmp.path / "err.txt");
    CHECK(log.find("scene_0000") != std::string::npos);
    CHECK(log.find("range error") != std::string::npos);
}

TEST_CASE("cli: train-map echoes paper defaults in the header") {
    TempDir tmp("dfl_cli_tm_echo");
    // Missing dataset: the resolved-config echo still prints, then exit 3.
    write_cfg(tmp.path / "tm.cfg", "data = missing_dir\n");
    const int code = run("train-map --config tm.cfg --out o", tmp.path, "echo.txt");
    CHECK(code == 3);
    const std::string log = slurp(tmp.path / "echo.txt");
    CHECK(log.find("lambda_reg = 1e-05") != std::string::npos);
    CHECK(log.find("lr = 2e-05") != std::string::npos);
    CHECK(log.find("total_epochs = 30") != std::string::npos);
    CHECK(log.find("warmup_epochs = 10") != std::string::npos);
    CHECK(log.find("alternation_period = 5") != std::string::npos);
    CHECK(log.find("data error") != std::string::npos);
}

TEST_CASE("cli: train-gan echoes paper defaults in the header") {
    TempDir tmp("dfl_cli_tg_echo");
    write_cfg(tmp.path / "tg.cfg", "data = missing_dir\n");
    const int code = run("train-gan --config tg.cfg --out o", tmp.path, "echo.txt");
    CHECK(code == 3);
    const std::string log = slurp(tmp.path / "echo.txt");
    CHECK(log.find("lr = 2e-04") != std::string::npos);
    CHECK(log.find("batch_size = 4") != std::string::npos);
    CHECK(log.find("alpha = 0.012") != std::string::npos);
    CHECK(log.find("beta = 0.002") != std::string::npos);
    CHECK(log.find("anneal_iters = 20000") != std::string::npos);
}

TEST_CASE("cli: toy two-stage training pipeline with ablation flags") {
    TempDir tmp("dfl_cli_pipeline");
    write_cfg(tmp.path / "synth.cfg", "count = 2\nc_max = 6\ndepth_layout = coc:0,4\nsize = 32x32\n");
    REQUIRE(run("synth --config synth.cfg --out data --seed 5", tmp.path) == 0);

    write_cfg(tmp.path / "tm.cfg",
              "data = data\nc_max = 6\ntotal_epochs = 3\nwarmup_epochs = 2\n"
              "alternation_period = 1\nlr = 1e-3\nbase_channels = 4\nbatch_size = 2\n"
              "split = all\n");
    REQUIRE(run("train-map --config tm.cfg --out map_run --seed 2", tmp.path) == 0);
    CHECK(fs::exists(tmp.path / "map_run" / "estimator.ckpt"));
    CHECK(fs::exists(tmp.path / "map_run" / "bank.ckpt"));
    const std::string hist = slurp(tmp.path / "map_run" / "history.csv");
    CHECK(hist.find("epoch,phase,mean_loss,mean_smoothness") == 0);
    // history rows = total_epochs
    CHECK(std::count(hist.begin(), hist.end(), '\n') == 4);  // header + 3 epochs
    CHECK(fs::exists(tmp.path / "map_run" / "preview_scene_0000.png"));

    write_cfg(tmp.path / "tg.cfg",
              "data = data\nc_max = 6\nepochs = 3\nmax_iters = 3\nbatch_size = 2\n"
              "anneal_iters = 2\nlr = 1e-3\nbase_channels = 8\ndisc_channels0 = 6\n"
              "disc_channels1 = 8\npatch = 32\nextractor = random:1\nextractor_channels = 4\n"
              "split = all\nmaps = estimator:map_run/estimator.ckpt\n");
    REQUIRE(run("train-gan --config tg.cfg --out gan_run --no-gan --no-lp --seed 3", tmp.path) ==
            0);
    const std::string ghist = slurp(tmp.path / "gan_run" / "history.csv");
    CHECK(ghist.find("epoch,iter,L_c,L_p,L_adv,L_D,gp,guidance_weight,lr") == 0);
    // --no-gan --no-lp: perceptual and adversarial columns are exactly zero.
    std::istringstream lines(ghist);
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 9);
        CHECK(std::stod(cells[3]) == 0.0);  // L_p
        CHECK(std::stod(cells[4]) == 0.0);  // L_adv
        CHECK(std::stod(cells[5]) == 0.0);  // L_D
    }
    CHECK(fs::exists(tmp.path / "gan_run" / "generator.ckpt"));
}

TEST_CASE("cli: infer and eval are deterministic and honor exit codes") {
    TempDir tmp("dfl_cli_infer_eval");
    write_cfg(tmp.path / "synth.cfg", "count = 2\nc_max = 6\ndepth_layout = coc:0,4\nsize = 32x32\n");
    REQUIRE(run("synth --config synth.cfg --out data --seed 11", tmp.path) == 0);
    write_cfg(tmp.path / "tg.cfg",
              "data = data\nc_max = 6\nepochs = 2\nmax_iters = 2\nbatch_size = 2\n"
              "anneal_iters = 2\nlr = 1e-3\nbase_channels = 8\ndisc_channels0 = 6\n"
              "disc_channels1 = 8\npatch = 32\nextractor = random:1\nextractor_channels = 4\n"
              "split = all\n");
    REQUIRE(run("train-gan --config tg.cfg --out gan --seed 3 --deterministic", tmp.path) == 0);

    // Missing checkpoint is a data error (exit 3).
    CHECK(run("infer --checkpoint nope.ckpt data/scene_0000/oof.png --out i0", tmp.path) == 3);
    // Undecodable image is a data error.
    write_cfg(tmp.path / "junk.png", "this is not a png");
    CHECK(run("infer --checkpoint gan/generator.ckpt junk.png --out i0", tmp.path) == 3);

    REQUIRE(run("infer --checkpoint gan/generator.ckpt data/scene_0000/oof.png --out i1 "
                "--deterministic", tmp.path) == 0);
    REQUIRE(run("infer --checkpoint gan/generator.ckpt data/scene_0000/oof.png --out i2 "
                "--deterministic", tmp.path) == 0);
    CHECK(slurp(tmp.path / "i1" / "oof_deblurred.png") ==
          slurp(tmp.path / "i2" / "oof_deblurred.png"));

    write_cfg(tmp.path / "ev.cfg", "data = data\nc_max = 6\nsplit = all\n");
    REQUIRE(run("eval --config ev.cfg --out e1 --deterministic", tmp.path) == 0);
    REQUIRE(run("eval --config ev.cfg --out e2 --deterministic", tmp.path) == 0);
    CHECK(slurp(tmp.path / "e1" / "report.csv") == slurp(tmp.path / "e2" / "report.csv"));

    // Identity model: the report equals metrics(blurred, sharp) recomputed here.
    const SceneSample s = import_scene((tmp.path / "data" / "scene_0000").string(), 6.0);
    const std::string csv = slurp(tmp.path / "e1" / "report.csv");
    const std::string want = strf("scene_0000,%.6f,%.6f,%.6f,", psnr(s.oof, s.aif),
                                  ssim(s.oof, s.aif), mae(s.oof, s.aif));
    CHECK(csv.find(want) != std::string::npos);

    // Two-stage mode beats the identity baseline on this synthetic split.
    REQUIRE(run("eval --config ev.cfg --two-stage --out e3", tmp.path) == 0);
    const std::string id_mean = slurp(tmp.path / "e1" / "report.csv");
    const std::string ts_mean = slurp(tmp.path / "e3" / "report.csv");
    auto mean_psnr = [](const std::string& csv_text) {
        const size_t pos = csv_text.find("mean,");
        REQUIRE(pos != std::string::npos);
        return std::stod(csv_text.substr(pos + 5));
    };
    CHECK(mean_psnr(ts_mean) > mean_psnr(id_mean));

    // Reference rows show up in the table.
    REQUIRE(run(strf("eval --config ev.cfg --out e4 --refs %s/published_results.csv",
                     DFL_DATA_DIR), tmp.path, "table.txt") == 0);
    const std::string table = slurp(tmp.path / "table.txt");
    CHECK(table.find("25.56") != std::string::npos);
    CHECK(table.find("0.111") != std::string::npos);
}

TEST_CASE("cli: bad usage exits with the config code") {
    TempDir tmp("dfl_cli_usage");
    CHECK(run("bogus-subcommand", tmp.path) == 2);
    CHECK(run("eval", tmp.path) == 2);  // missing required config key "data"
}
