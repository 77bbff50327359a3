// defocuslab: synthesize scenes, train both stages, run inference, evaluate.

#include <CLI11.hpp>
#include <omp.h>

#include <filesystem>
#include <iostream>

#include "dfl/dfl.hpp"

namespace fs = std::filesystem;
using namespace dfl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed = 0;
    bool deterministic = false;
    int workers = 0;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "key = value config file");
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_flag("--deterministic", o.deterministic, "fix all seeds; byte-identical reruns");
    cmd->add_option("--workers", o.workers, "bound data/compute parallelism");
}

KeyValueConfig load_config(const CommonOpts& o) {
    KeyValueConfig cfg;
    if (!o.config_path.empty()) cfg = KeyValueConfig::load(o.config_path);
    if (o.workers > 0) omp_set_num_threads(o.workers);
    return cfg;
}

void echo_and_save(const std::string& name, const CommonOpts& o, KeyValueConfig resolved) {
    resolved.set("subcommand", name);
    resolved.set("seed", static_cast<long long>(o.seed));
    resolved.set("deterministic", std::string(o.deterministic ? "true" : "false"));
    fs::create_directories(o.out_dir);
    resolved.save(o.out_dir + "/resolved_config.cfg");
    std::cout << "defocuslab " << name << "\n" << resolved.text();
}

uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot hash missing file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return hash64(ss.str());
}

KernelBank bank_from_spec(const std::string& spec, int c_max) {
    if (spec == "butterworth" || spec.empty()) return init_bank(c_max);
    if (spec == "gaussian") return make_gaussian_bank(c_max);
    if (spec == "identity") return make_identity_bank(c_max);
    return load_bank(spec);  // checkpoint path
}

std::vector<const SceneRecord*> split_records(const DatasetIndex& idx, const std::string& which) {
    std::vector<const SceneRecord*> out;
    for (const SceneRecord& r : idx.records) {
        const bool keep = which == "all" || (which == "train" && r.split == Split::Train) ||
                          (which == "val" && r.split == Split::Val) ||
                          (which == "test" && r.split == Split::Test);
        if (keep) out.push_back(&r);
    }
    return out;
}

std::vector<SceneSample> load_split(const DatasetIndex& idx, const std::string& which,
                                    double c_max) {
    std::vector<SceneSample> out;
    for (const SceneRecord* r : split_records(idx, which))
        out.push_back(load_record(idx.root, *r, c_max));
    if (out.empty()) throw DataError("dataset error: split '" + which + "' is empty");
    return out;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

int cmd_synth(const CommonOpts& o) {
    KeyValueConfig cfg = load_config(o);
    const int count = cfg.get_int("count", 4);
    const int c_max = cfg.get_int("c_max", 25);
    if (count < 1) throw ConfigError("synth: count must be >= 1");
    SceneSpec spec;
    spec.texture = cfg.get_str("texture", "mix");
    spec.depth_layout = cfg.get_str("depth_layout", "coc:0,6");
    spec.focal_depth = cfg.get_double("focal_depth", 1.0);
    spec.aperture = cfg.get_double("aperture", 40.0);
    spec.seed = o.seed;
    {
        const std::string size = cfg.get_str("size", "96x96");
        const auto xpos = size.find('x');
        if (xpos == std::string::npos) throw ConfigError("synth: size must look like 96x96");
        spec.width = std::stoi(size.substr(0, xpos));
        spec.height = std::stoi(size.substr(xpos + 1));
    }
    const KernelBank bank = bank_from_spec(cfg.get_str("bank", "butterworth"), c_max);

    KeyValueConfig resolved = spec.to_config();
    resolved.set("count", count);
    resolved.set("c_max", c_max);
    resolved.set("bank", cfg.get_str("bank", "butterworth"));
    echo_and_save("synth", o, resolved);

    static const char* kTextures[] = {"noise", "checker", "gradient"};
    KeyValueConfig manifest;
    manifest.set("count", count);
    manifest.set("seed", static_cast<long long>(o.seed));
    for (int i = 0; i < count; ++i) {
        SceneSpec per = spec;
        if (spec.texture == "mix") per.texture = kTextures[i % 3];
        const std::string id = strf("scene_%04d", i);
        SceneSample sample;
        try {
            sample = generate_scene(per, bank, static_cast<uint64_t>(i));
        } catch (const RangeError& e) {
            throw RangeError(strf("%s: %s", id.c_str(), e.what()));
        }
        const std::string dir = o.out_dir + "/" + id;
        fs::create_directories(dir);
        export_scene(sample, dir);
        for (const char* f : {"aif.png", "oof.png", "dp_l.png", "dp_r.png", "gt_map.pfm"})
            manifest.set("hash_" + id + "_" + f,
                         strf("%016llx", static_cast<unsigned long long>(
                                             file_hash(dir + "/" + std::string(f)))));
    }
    DatasetLayout::synthetic().to_config().save(o.out_dir + "/layout.cfg");
    manifest.save(o.out_dir + "/manifest.cfg");
    std::cout << "wrote " << count << " scenes under " << o.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train-map
// ---------------------------------------------------------------------------

int cmd_train_map(const CommonOpts& o) {
    KeyValueConfig cfg = load_config(o);
    const std::string data_root = cfg.get_str("data");
    EstimatorConfig ec;
    ec.lambda_reg = cfg.get_double("lambda_reg", ec.lambda_reg);
    ec.lr = cfg.get_double("lr", ec.lr);
    ec.bank_lr = cfg.get_double("bank_lr", ec.bank_lr);
    ec.warmup_epochs = cfg.get_int("warmup_epochs", ec.warmup_epochs);
    ec.alternation_period = cfg.get_int("alternation_period", ec.alternation_period);
    ec.total_epochs = cfg.get_int("total_epochs", ec.total_epochs);
    ec.c_max = cfg.get_int("c_max", ec.c_max);
    ec.batch_size = cfg.get_int("batch_size", ec.batch_size);
    ec.validate();
    EstimatorArch arch;
    arch.base_channels = cfg.get_int("base_channels", arch.base_channels);
    arch.c_max = ec.c_max;
    const std::string split = cfg.get_str("split", "train");

    KeyValueConfig resolved;
    resolved.set("data", data_root);
    resolved.set("split", split);
    resolved.set("lambda_reg", ec.lambda_reg);
    resolved.set("lr", ec.lr);
    resolved.set("bank_lr", ec.bank_lr);
    resolved.set("warmup_epochs", ec.warmup_epochs);
    resolved.set("alternation_period", ec.alternation_period);
    resolved.set("total_epochs", ec.total_epochs);
    resolved.set("c_max", ec.c_max);
    resolved.set("batch_size", ec.batch_size);
    resolved.set("base_channels", arch.base_channels);
    echo_and_save("train-map", o, resolved);

    DatasetLayout layout = DatasetLayout::synthetic();
    if (cfg.has("layout"))
        layout = DatasetLayout::from_config(KeyValueConfig::load(cfg.get_str("layout")));
    SplitConfig sc;
    sc.seed = o.seed;
    const DatasetIndex idx = index_dataset_cached(data_root, layout, sc);
    const std::vector<SceneSample> train = load_split(idx, split, ec.c_max);

    MapEstimator f = build_estimator_f(arch, o.seed);
    KernelBank bank = bank_from_spec(cfg.get_str("bank", "butterworth"), ec.c_max);
    const auto history = train_defocus_estimator(train, f, bank, ec);

    f.save(o.out_dir + "/estimator.ckpt");
    save_bank(bank, o.out_dir + "/bank.ckpt");
    std::ofstream hist(o.out_dir + "/history.csv", std::ios::binary);
    hist << history_csv(history);
    hist.close();

    // Preview maps for the validation split (falls back to training scenes).
    auto val_records = split_records(idx, "val");
    if (val_records.empty()) val_records = split_records(idx, split);
    int previews = 0;
    for (const SceneRecord* r : val_records) {
        if (previews >= 4) break;
        const SceneSample s = load_record(idx.root, *r, ec.c_max);
        export_map(estimate_map(f, s.dp_left, s.dp_right), o.out_dir + "/preview_" + r->id);
        ++previews;
    }
    std::cout << strf("trained %d epochs; final mean loss %.6g\n", ec.total_epochs,
                      history.back().mean_loss);
    return 0;
}

// ---------------------------------------------------------------------------
// train-gan
// ---------------------------------------------------------------------------

int cmd_train_gan(const CommonOpts& o, bool no_dg, bool no_ms, bool no_rcab, bool no_lp,
                  bool no_gan) {
    KeyValueConfig cfg = load_config(o);
    const std::string data_root = cfg.get_str("data");
    GanTrainConfig gc;
    gc.loss.alpha = cfg.get_double("alpha", gc.loss.alpha);
    gc.loss.beta = cfg.get_double("beta", gc.loss.beta);
    gc.loss.gp_coeff = cfg.get_double("gp_coeff", gc.loss.gp_coeff);
    gc.loss.gamma = cfg.get_double("gamma", gc.loss.gamma);
    gc.anneal.total_iters = cfg.get_int("anneal_iters", 20000);
    gc.lr = cfg.get_double("lr", gc.lr);
    gc.lr_halflife_epochs = cfg.get_int("lr_halflife_epochs", gc.lr_halflife_epochs);
    gc.epochs = cfg.get_int("epochs", gc.epochs);
    gc.batch_size = cfg.get_int("batch_size", gc.batch_size);
    gc.max_iters = cfg.get_int("max_iters", 0);
    gc.seed = o.seed;
    gc.use_lp = !no_lp;
    gc.use_gan = !no_gan;
    gc.disc.hidden = {cfg.get_int("disc_channels0", 64), cfg.get_int("disc_channels1", 128)};
    const int c_max = cfg.get_int("c_max", 25);
    const int patch = cfg.get_int("patch", 512);
    GeneratorConfig gcfg = GeneratorConfig::defaults(c_max, cfg.get_int("base_channels", 32));
    gcfg.use_dg = !no_dg;
    gcfg.use_ms = !no_ms;
    gcfg.dgb.use_rcab = !no_rcab;
    const std::string split = cfg.get_str("split", "train");
    const std::string maps_spec = cfg.get_str("maps", "gt");
    const std::string extractor_spec = cfg.get_str("extractor", "random:0");
    gc.validate();
    gcfg.validate();

    KeyValueConfig resolved;
    resolved.set("data", data_root);
    resolved.set("split", split);
    resolved.set("lr", gc.lr);
    resolved.set("epochs", gc.epochs);
    resolved.set("batch_size", gc.batch_size);
    resolved.set("alpha", gc.loss.alpha);
    resolved.set("beta", gc.loss.beta);
    resolved.set("gp_coeff", gc.loss.gp_coeff);
    resolved.set("gamma", gc.loss.gamma);
    resolved.set("anneal_iters", static_cast<long long>(gc.anneal.total_iters));
    resolved.set("max_iters", static_cast<long long>(gc.max_iters));
    resolved.set("c_max", c_max);
    resolved.set("patch", patch);
    resolved.set("base_channels", gcfg.dgb.base_channels);
    resolved.set("maps", maps_spec);
    resolved.set("extractor", extractor_spec);
    resolved.set("use_dg", std::string(gcfg.use_dg ? "true" : "false"));
    resolved.set("use_ms", std::string(gcfg.use_ms ? "true" : "false"));
    resolved.set("use_rcab", std::string(gcfg.dgb.use_rcab ? "true" : "false"));
    resolved.set("use_lp", std::string(gc.use_lp ? "true" : "false"));
    resolved.set("use_gan", std::string(gc.use_gan ? "true" : "false"));
    echo_and_save("train-gan", o, resolved);

    DatasetLayout layout = DatasetLayout::synthetic();
    if (cfg.has("layout"))
        layout = DatasetLayout::from_config(KeyValueConfig::load(cfg.get_str("layout")));
    SplitConfig sc;
    sc.seed = o.seed;
    const DatasetIndex idx = index_dataset_cached(data_root, layout, sc);
    std::vector<SceneSample> train = load_split(idx, split, c_max);

    // Crop every sample to the training patch (multiple of 8).
    const int p8 = std::min({patch, train[0].aif.h, train[0].aif.w}) / 8 * 8;
    if (p8 < 8) throw ConfigError("train-gan: images too small for an 8-aligned patch");
    Rng crop_rng = Rng(o.seed).fork(0xc09);
    for (SceneSample& s : train) s = sample_patch(s, p8, crop_rng);

    // Frozen per-sample maps: synthetic GT or a stage-1 estimator checkpoint.
    std::vector<DefocusMap> maps;
    if (maps_spec == "gt") {
        for (const SceneSample& s : train) {
            if (!s.gt_map) throw DataError("train-gan: maps = gt but a sample has no gt map");
            maps.push_back(*s.gt_map);
        }
    } else if (maps_spec.rfind("estimator:", 0) == 0) {
        const MapEstimator f = MapEstimator::load(maps_spec.substr(10));
        for (const SceneSample& s : train) maps.push_back(estimate_map(f, s.dp_left, s.dp_right));
    } else {
        throw ConfigError("train-gan: maps must be 'gt' or 'estimator:<ckpt>'");
    }

    FeatureExtractor fe;
    const FeatureExtractor* fe_ptr = nullptr;
    if (gc.use_lp && gc.loss.alpha > 0.0) {
        if (extractor_spec.rfind("random:", 0) == 0)
            fe = FeatureExtractor::random(std::stoull(extractor_spec.substr(7)),
                                          cfg.get_int("extractor_channels", 8));
        else if (extractor_spec.rfind("file:", 0) == 0)
            fe = FeatureExtractor::pretrained(extractor_spec.substr(5));
        else
            throw ConfigError("train-gan: extractor must be 'random:<seed>' or 'file:<ckpt>'");
        fe_ptr = &fe;
    }

    Generator gen(gcfg, o.seed);
    Discriminator disc(gc.disc, o.seed + 1);
    const MapsSource source = [&](size_t i) { return maps[i]; };
    const auto history = train_defocusgan(train, gen, disc, source, gc, fe_ptr);

    gen.save(o.out_dir + "/generator.ckpt");
    disc.save(o.out_dir + "/discriminator.ckpt");
    std::ofstream hist(o.out_dir + "/history.csv", std::ios::binary);
    hist << gan_history_csv(history);
    hist.close();
    std::cout << strf("trained %zu iterations; final L_c %.6g L_p %.6g L_adv %.6g\n",
                      history.size(), history.back().l_c, history.back().l_p,
                      history.back().l_adv);
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int cmd_infer(const CommonOpts& o, const std::string& ckpt, const std::vector<std::string>& inputs,
              bool tiled) {
    KeyValueConfig cfg = load_config(o);
    if (ckpt.empty()) throw ConfigError("infer: --checkpoint is required");
    if (inputs.empty()) throw ConfigError("infer: at least one input image is required");
    KeyValueConfig resolved;
    resolved.set("checkpoint", ckpt);
    resolved.set("tiled", std::string(tiled ? "true" : "false"));
    echo_and_save("infer", o, resolved);

    const Generator gen = Generator::load(ckpt);
    TileConfig tcfg;
    tcfg.tile = cfg.get_int("tile", tcfg.tile);
    tcfg.overlap = cfg.get_int("overlap", tcfg.overlap);
    tcfg.context = cfg.get_int("context", tcfg.context);
    for (const std::string& input : inputs) {
        const Image oof = read_png(input);
        const Image out = tiled ? generator_infer_tiled(gen, oof, tcfg)
                                : generator_infer(gen, oof);
        const std::string stem = fs::path(input).stem().string();
        write_png(o.out_dir + "/" + stem + "_deblurred.png", clamp01(out), 16);
        std::cout << input << " -> " << o.out_dir << "/" << stem << "_deblurred.png\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonOpts& o, bool two_stage, const std::string& refs_path) {
    KeyValueConfig cfg = load_config(o);
    const std::string data_root = cfg.get_str("data");
    const std::string split = cfg.get_str("split", "test");
    const int c_max = cfg.get_int("c_max", 25);
    std::string model = cfg.get_str("model", "identity");
    if (two_stage) model = "two-stage";

    KeyValueConfig resolved;
    resolved.set("data", data_root);
    resolved.set("split", split);
    resolved.set("model", model);
    resolved.set("c_max", c_max);
    echo_and_save("eval", o, resolved);

    DatasetLayout layout = DatasetLayout::synthetic();
    if (cfg.has("layout"))
        layout = DatasetLayout::from_config(KeyValueConfig::load(cfg.get_str("layout")));
    SplitConfig sc;
    sc.seed = o.seed;
    const DatasetIndex idx = index_dataset_cached(data_root, layout, sc);
    const auto records = split_records(idx, split);
    if (records.empty()) throw DataError("dataset error: split '" + split + "' is empty");

    std::optional<Generator> gen;
    std::optional<KernelBank> bank;
    std::optional<MapEstimator> estimator;
    WienerConfig wc;
    wc.nsr = cfg.get_double("nsr", 1e-2);
    if (model.rfind("generator:", 0) == 0) {
        gen = Generator::load(model.substr(10));
    } else if (model == "two-stage") {
        bank = bank_from_spec(cfg.get_str("bank", "butterworth"), c_max);
        const std::string maps_spec = cfg.get_str("maps", "gt");
        if (maps_spec.rfind("estimator:", 0) == 0)
            estimator = MapEstimator::load(maps_spec.substr(10));
        else if (maps_spec != "gt")
            throw ConfigError("eval: maps must be 'gt' or 'estimator:<ckpt>'");
    } else if (model != "identity") {
        throw ConfigError("eval: model must be identity, two-stage, or generator:<ckpt>");
    }

    std::vector<EvalPair> pairs;
    for (const SceneRecord* r : records) {
        const SceneSample s = load_record(idx.root, *r, c_max);
        EvalPair p;
        p.scene_id = r->id;
        p.target = s.aif;
        if (gen) {
            p.pred = clamp01(generator_infer(*gen, s.oof));
        } else if (bank) {
            if (!estimator && !s.gt_map)
                throw DataError("eval: two-stage with gt maps needs gt_map files");
            const DefocusMap map = estimator ? estimate_map(*estimator, s.dp_left, s.dp_right)
                                             : *s.gt_map;
            p.pred = clamp01(two_stage_deblur(s.oof, map, *bank, wc));
        } else {
            p.pred = s.oof;  // identity baseline
        }
        pairs.push_back(std::move(p));
    }
    const MetricsReport rep = make_report(pairs);
    std::vector<ReferenceRow> refs;
    if (!refs_path.empty()) refs = load_reference_rows(refs_path);

    std::ofstream csv(o.out_dir + "/report.csv", std::ios::binary);
    csv << report_csv(rep);
    csv.close();
    const std::string table = report_table(rep, refs);
    std::ofstream txt(o.out_dir + "/report.txt", std::ios::binary);
    txt << table;
    txt.close();
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"defocus deblurring toolkit"};
    app.require_subcommand(1);

    CommonOpts synth_o, map_o, gan_o, infer_o, eval_o;
    bool no_dg = false, no_ms = false, no_rcab = false, no_lp = false, no_gan = false;
    bool tiled = false, two_stage = false;
    std::string infer_ckpt, refs_path;
    std::vector<std::string> infer_inputs;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic scene dataset");
    add_common(synth, synth_o);
    CLI::App* train_map = app.add_subcommand("train-map", "stage 1: defocus map estimation");
    add_common(train_map, map_o);
    CLI::App* train_gan = app.add_subcommand("train-gan", "stage 2: deblurring network");
    add_common(train_gan, gan_o);
    train_gan->add_flag("--no-dg", no_dg, "disable defocus-map guidance");
    train_gan->add_flag("--no-ms", no_ms, "disable the multi-scale cascade");
    train_gan->add_flag("--no-rcab", no_rcab, "replace attention blocks with plain convs");
    train_gan->add_flag("--no-lp", no_lp, "disable the perceptual loss");
    train_gan->add_flag("--no-gan", no_gan, "disable the adversarial loss");
    CLI::App* infer = app.add_subcommand("infer", "deblur images with a trained generator");
    add_common(infer, infer_o);
    infer->add_option("--checkpoint", infer_ckpt, "generator checkpoint");
    infer->add_option("inputs", infer_inputs, "input PNG images");
    infer->add_flag("--tile", tiled, "tiled inference with overlap blending");
    CLI::App* eval = app.add_subcommand("eval", "metrics report over a split");
    add_common(eval, eval_o);
    eval->add_flag("--two-stage", two_stage, "deconvolution baseline instead of the generator");
    eval->add_option("--refs", refs_path, "published-results CSV for side-by-side rows");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_o);
        if (train_map->parsed()) return cmd_train_map(map_o);
        if (train_gan->parsed()) return cmd_train_gan(gan_o, no_dg, no_ms, no_rcab, no_lp, no_gan);
        if (infer->parsed()) return cmd_infer(infer_o, infer_ckpt, infer_inputs, tiled);
        if (eval->parsed()) return cmd_eval(eval_o, two_stage, refs_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CapabilityError& e) {
        std::cerr << "capability error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const RangeError& e) {
        std::cerr << "range error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
