#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfl/config.hpp"
#include "dfl/reblur.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Dataset ingestion. Scenes are discovered through per-role glob patterns
// with exactly one '*' that binds the scene id. Patterns containing '/'
// match root-relative paths ('*' does not cross directories); bare filename
// patterns match recursively, in which case one id resolving to two files
// is a layout error.
// ---------------------------------------------------------------------------

struct DatasetLayout {
    std::string blurred = "source/*.png";
    std::string target = "target/*.png";
    std::string dp_left = "dp/*_L.png";
    std::string dp_right = "dp/*_R.png";
    std::string gt_map;  // optional role (synthetic data)

    static DatasetLayout synthetic() {
        DatasetLayout l;
        l.blurred = "*/oof.png";
        l.target = "*/aif.png";
        l.dp_left = "*/dp_l.png";
        l.dp_right = "*/dp_r.png";
        l.gt_map = "*/gt_map.pfm";
        return l;
    }
    static DatasetLayout from_config(const KeyValueConfig& cfg) {
        DatasetLayout l;
        l.blurred = cfg.get_str("blurred_glob", l.blurred);
        l.target = cfg.get_str("target_glob", l.target);
        l.dp_left = cfg.get_str("dp_left_glob", l.dp_left);
        l.dp_right = cfg.get_str("dp_right_glob", l.dp_right);
        l.gt_map = cfg.get_str("gt_map_glob", l.gt_map);
        return l;
    }
    KeyValueConfig to_config() const {
        KeyValueConfig cfg;
        cfg.set("blurred_glob", blurred);
        cfg.set("target_glob", target);
        cfg.set("dp_left_glob", dp_left);
        cfg.set("dp_right_glob", dp_right);
        cfg.set("gt_map_glob", gt_map);
        return cfg;
    }
};

struct SplitConfig {
    double train = 0.70, val = 0.148, test = 0.152;
    uint64_t seed = 0;

    void validate() const {
        if (train < 0 || val < 0 || test < 0 || train + val + test > 1.0 + 1e-9)
            throw ConfigError("split fractions must be nonnegative and sum to at most 1");
    }
};

enum class Split { Train = 0, Val = 1, Test = 2 };

struct SceneRecord {
    std::string id;
    std::string blurred, target, dp_left, dp_right;  // root-relative paths
    std::string gt_map;                               // empty when absent
    Split split = Split::Train;
};

struct DatasetIndex {
    std::string root;
    std::vector<SceneRecord> records;       // sorted by scene id
    std::vector<std::string> rejections;    // human-readable per-scene reports
};

namespace detail {

struct GlobPattern {
    std::string prefix, suffix;
    bool basename_only = false;
};

inline GlobPattern parse_glob(const std::string& pattern, const char* role) {
    const size_t star = pattern.find('*');
    if (star == std::string::npos || pattern.find('*', star + 1) != std::string::npos)
        throw ConfigError(strf("layout pattern for %s must contain exactly one '*': %s", role,
                               pattern.c_str()));
    GlobPattern g;
    g.prefix = pattern.substr(0, star);
    g.suffix = pattern.substr(star + 1);
    g.basename_only = pattern.find('/') == std::string::npos;
    return g;
}

/// Returns the id bound by '*', or nullopt when the candidate fails.
inline std::optional<std::string> match_glob(const GlobPattern& g, const std::string& candidate) {
    if (candidate.size() < g.prefix.size() + g.suffix.size()) return std::nullopt;
    if (candidate.compare(0, g.prefix.size(), g.prefix) != 0) return std::nullopt;
    if (candidate.compare(candidate.size() - g.suffix.size(), g.suffix.size(), g.suffix) != 0)
        return std::nullopt;
    std::string id = candidate.substr(g.prefix.size(),
                                      candidate.size() - g.prefix.size() - g.suffix.size());
    if (id.empty()) return std::nullopt;
    if (!g.basename_only && id.find('/') != std::string::npos) return std::nullopt;
    return id;
}

/// role -> (id -> relative path); throws on one id matching two files.
inline std::map<std::string, std::string> scan_role(const std::string& root,
                                                    const std::string& pattern, const char* role) {
    namespace fs = std::filesystem;
    const GlobPattern g = parse_glob(pattern, role);
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const std::string rel = fs::relative(entry.path(), root).generic_string();
        const std::string candidate = g.basename_only ? entry.path().filename().string() : rel;
        const auto id = match_glob(g, candidate);
        if (!id) continue;
        auto [it, inserted] = out.emplace(*id, rel);
        if (!inserted)
            throw DataError(strf("layout error: role %s pattern %s matches both %s and %s for "
                                 "scene %s", role, pattern.c_str(), it->second.c_str(),
                                 rel.c_str(), id->c_str()));
    }
    return out;
}

}  // namespace detail

/// Split assignment: rank scene ids by a seeded hash, then cut at the
/// configured fractions (rounded, so 500 scenes give 350/74/76). Membership
/// is deterministic for a fixed id set and seed.
inline std::vector<Split> assign_splits(const std::vector<std::string>& sorted_ids,
                                        const SplitConfig& cfg) {
    cfg.validate();
    const size_t n = sorted_ids.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::vector<uint64_t> keys(n);
    for (size_t i = 0; i < n; ++i) keys[i] = hash64(sorted_ids[i], cfg.seed);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return keys[a] != keys[b] ? keys[a] < keys[b] : sorted_ids[a] < sorted_ids[b];
    });
    const size_t n_train = static_cast<size_t>(std::lround(cfg.train * n));
    const size_t n_val = std::min(n - n_train, static_cast<size_t>(std::lround(cfg.val * n)));
    std::vector<Split> splits(n, Split::Test);
    for (size_t rank = 0; rank < n; ++rank) {
        const Split s = rank < n_train            ? Split::Train
                        : rank < n_train + n_val ? Split::Val
                                                 : Split::Test;
        splits[order[rank]] = s;
    }
    return splits;
}

inline DatasetIndex index_dataset(const std::string& root, const DatasetLayout& layout,
                                  const SplitConfig& split_cfg = {}) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("dataset root does not exist: " + root);

    const auto blurred = detail::scan_role(root, layout.blurred, "blurred");
    const auto target = detail::scan_role(root, layout.target, "target");
    const auto dp_l = detail::scan_role(root, layout.dp_left, "dp_left");
    const auto dp_r = detail::scan_role(root, layout.dp_right, "dp_right");
    std::map<std::string, std::string> gt;
    if (!layout.gt_map.empty()) gt = detail::scan_role(root, layout.gt_map, "gt_map");

    std::map<std::string, int> ids;  // union of ids across roles
    for (const auto* role : {&blurred, &target, &dp_l, &dp_r})
        for (const auto& [id, path] : *role) ids[id] = 0;

    DatasetIndex index;
    index.root = root;
    std::vector<std::string> kept_ids;
    for (const auto& [id, unused] : ids) {
        std::string missing;
        if (!blurred.count(id)) missing += " blurred";
        if (!target.count(id)) missing += " target";
        if (!dp_l.count(id)) missing += " dp_left";
        if (!dp_r.count(id)) missing += " dp_right";
        if (!missing.empty()) {
            index.rejections.push_back(strf("scene %s: missing role(s)%s", id.c_str(),
                                            missing.c_str()));
            continue;
        }
        SceneRecord r;
        r.id = id;
        r.blurred = blurred.at(id);
        r.target = target.at(id);
        r.dp_left = dp_l.at(id);
        r.dp_right = dp_r.at(id);
        if (gt.count(id)) r.gt_map = gt.at(id);
        index.records.push_back(std::move(r));
        kept_ids.push_back(id);
    }
    if (index.records.empty())
        throw DataError("dataset error: no complete scenes under " + root);

    const std::vector<Split> splits = assign_splits(kept_ids, split_cfg);
    for (size_t i = 0; i < index.records.size(); ++i) index.records[i].split = splits[i];
    return index;
}

// ---------------------------------------------------------------------------
// Index cache: a versioned manifest keyed by root + layout + split config,
// stored under $DEFOCUSLAB_CACHE when set.
// ---------------------------------------------------------------------------

inline std::string index_manifest_text(const DatasetIndex& index) {
    std::ostringstream out;
    out << "DFLINDEX 1\n" << "root = " << index.root << "\n";
    for (const SceneRecord& r : index.records)
        out << "scene " << r.id << " " << static_cast<int>(r.split) << " " << r.blurred << " "
            << r.target << " " << r.dp_left << " " << r.dp_right << " "
            << (r.gt_map.empty() ? "-" : r.gt_map) << "\n";
    for (const std::string& rej : index.rejections) out << "rejected " << rej << "\n";
    return out.str();
}

inline std::optional<DatasetIndex> parse_index_manifest(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "DFLINDEX 1") return std::nullopt;
    DatasetIndex index;
    while (std::getline(in, line)) {
        if (line.rfind("root = ", 0) == 0) {
            index.root = line.substr(7);
        } else if (line.rfind("scene ", 0) == 0) {
            std::istringstream ls(line.substr(6));
            SceneRecord r;
            int split;
            if (!(ls >> r.id >> split >> r.blurred >> r.target >> r.dp_left >> r.dp_right >>
                  r.gt_map))
                return std::nullopt;
            if (r.gt_map == "-") r.gt_map.clear();
            r.split = static_cast<Split>(split);
            index.records.push_back(std::move(r));
        } else if (line.rfind("rejected ", 0) == 0) {
            index.rejections.push_back(line.substr(9));
        }
    }
    return index;
}

/// index_dataset with a manifest cache under $DEFOCUSLAB_CACHE (when set).
inline DatasetIndex index_dataset_cached(const std::string& root, const DatasetLayout& layout,
                                         const SplitConfig& split_cfg = {}) {
    const char* cache_dir = std::getenv("DEFOCUSLAB_CACHE");
    if (!cache_dir || !*cache_dir) return index_dataset(root, layout, split_cfg);
    namespace fs = std::filesystem;
    const uint64_t key =
        hash64(fs::absolute(root).string() + "\n" + layout.to_config().text() +
               strf("%.17g %.17g %.17g %llu", split_cfg.train, split_cfg.val, split_cfg.test,
                    static_cast<unsigned long long>(split_cfg.seed)));
    const fs::path cache_path = fs::path(cache_dir) / strf("index_%016llx.txt",
                                                           static_cast<unsigned long long>(key));
    if (fs::exists(cache_path)) {
        std::ifstream in(cache_path);
        std::ostringstream ss;
        ss << in.rdbuf();
        if (auto cached = parse_index_manifest(ss.str())) return *cached;
    }
    DatasetIndex index = index_dataset(root, layout, split_cfg);
    fs::create_directories(cache_dir);
    std::ofstream out(cache_path, std::ios::binary);
    out << index_manifest_text(index);
    return index;
}

// ---------------------------------------------------------------------------
// Loading and patch sampling.
// ---------------------------------------------------------------------------

inline SceneSample load_record(const std::string& root, const SceneRecord& rec, double c_max) {
    SceneSample s;
    s.oof = read_png(root + "/" + rec.blurred);
    s.aif = read_png(root + "/" + rec.target);
    s.dp_left = read_png(root + "/" + rec.dp_left);
    s.dp_right = read_png(root + "/" + rec.dp_right);
    if (!rec.gt_map.empty()) s.gt_map = DefocusMap{read_pfm(root + "/" + rec.gt_map), c_max};
    s.validate();
    return s;
}

/// Same crop window for every raster; optional horizontal flip mirrors all
/// rasters together and swaps the DP views (half-aperture geometry mirrors
/// under reflection).
inline SceneSample sample_patch(const SceneSample& s, int size, Rng& rng, bool augment_flip = false) {
    if (size < 1 || size > s.aif.h || size > s.aif.w)
        throw RangeError(strf("crop size %d exceeds image %dx%d", size, s.aif.h, s.aif.w));
    const int y0 = static_cast<int>(rng.below(s.aif.h - size + 1));
    const int x0 = static_cast<int>(rng.below(s.aif.w - size + 1));
    const bool flip = augment_flip && rng.uniform() < 0.5;

    auto crop = [&](const Tensor& t) {
        Tensor out(1, t.c, size, size);
        for (int c = 0; c < t.c; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    out.at(c, y, x) = t.at(c, y0 + y, flip ? x0 + size - 1 - x : x0 + x);
        return out;
    };
    SceneSample out;
    out.aif = crop(s.aif);
    out.oof = crop(s.oof);
    if (flip) {
        out.dp_left = crop(s.dp_right);
        out.dp_right = crop(s.dp_left);
    } else {
        out.dp_left = crop(s.dp_left);
        out.dp_right = crop(s.dp_right);
    }
    if (s.gt_map) out.gt_map = DefocusMap{crop(s.gt_map->values), s.gt_map->c_max};
    out.validate();
    return out;
}

}  // namespace dfl
