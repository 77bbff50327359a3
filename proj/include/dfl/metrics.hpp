#pragma once

#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dfl/common.hpp"
#include "dfl/image_io.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Image-quality metrics and report assembly. PSNR/SSIM/MAE are computed
// in-repo; LPIPS requires a pretrained network and is therefore a pluggable
// external scorer - when absent the column is reported absent, never zero.
// ---------------------------------------------------------------------------

constexpr double kPsnrCapDb = 100.0;

inline double psnr(const Image& pred, const Image& target) {
    require_same_shape(pred, target, "psnr");
    double se = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const double d = pred.v[i] - target.v[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(pred.v.size());
    if (mse <= 0.0) return kPsnrCapDb;
    return std::min(kPsnrCapDb, -10.0 * std::log10(mse));
}

inline double mae(const Image& pred, const Image& target) {
    require_same_shape(pred, target, "mae");
    return mean_abs_diff(pred, target);
}

/// Mean local SSIM on luminance: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1; window fully inside the image
/// (valid region), so images must be at least 11 pixels on each side.
inline double ssim(const Image& pred, const Image& target) {
    require_same_shape(pred, target, "ssim");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5, kK1 = 0.01, kK2 = 0.03;
    if (pred.h < kWin || pred.w < kWin)
        throw ShapeError(strf("ssim: image %dx%d smaller than the %dx%d window", pred.h, pred.w,
                              kWin, kWin));
    const Tensor x = luminance(pred);
    const Tensor y = luminance(target);

    double win[kWin][kWin];
    double wsum = 0.0;
    for (int u = 0; u < kWin; ++u)
        for (int v = 0; v < kWin; ++v) {
            const double dy = u - kWin / 2, dx = v - kWin / 2;
            win[u][v] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
            wsum += win[u][v];
        }
    for (auto& row : win)
        for (double& v : row) v /= wsum;

    const double c1 = kK1 * kK1, c2 = kK2 * kK2;
    double acc = 0.0;
    long count = 0;
    for (int oy = 0; oy + kWin <= x.h; ++oy)
        for (int ox = 0; ox + kWin <= x.w; ++ox) {
            double mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
            for (int u = 0; u < kWin; ++u) {
                const double* xr = x.row(0, oy + u) + ox;
                const double* yr = y.row(0, oy + u) + ox;
                for (int v = 0; v < kWin; ++v) {
                    const double w = win[u][v];
                    mx += w * xr[v];
                    my += w * yr[v];
                    mxx += w * xr[v] * xr[v];
                    myy += w * yr[v] * yr[v];
                    mxy += w * xr[v] * yr[v];
                }
            }
            const double vx = mxx - mx * mx, vy = myy - my * my, cov = mxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

using LpipsScorer = std::function<double(const Image& pred, const Image& target)>;

struct MetricsRow {
    std::string scene_id;
    double psnr_db = 0.0, ssim = 0.0, mae = 0.0;
    std::optional<double> lpips;
    bool lpips_failed = false;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    double mean_psnr = 0.0, mean_ssim = 0.0, mean_mae = 0.0;
    std::optional<double> mean_lpips;
    std::string checkpoint_id, config_hash;
};

struct EvalPair {
    std::string scene_id;
    Image pred, target;
};

inline MetricsReport make_report(const std::vector<EvalPair>& pairs,
                                 const LpipsScorer& lpips_scorer = nullptr) {
    if (pairs.empty()) throw DataError("make_report: no prediction/target pairs");
    MetricsReport rep;
    double sl = 0.0;
    long nl = 0;
    for (const EvalPair& p : pairs) {
        MetricsRow row;
        row.scene_id = p.scene_id;
        row.psnr_db = psnr(p.pred, p.target);
        row.ssim = ssim(p.pred, p.target);
        row.mae = mae(p.pred, p.target);
        if (lpips_scorer) {
            try {
                row.lpips = lpips_scorer(p.pred, p.target);
                sl += *row.lpips;
                ++nl;
            } catch (const std::exception&) {
                row.lpips_failed = true;
            }
        }
        rep.mean_psnr += row.psnr_db;
        rep.mean_ssim += row.ssim;
        rep.mean_mae += row.mae;
        rep.rows.push_back(std::move(row));
    }
    const double n = static_cast<double>(rep.rows.size());
    rep.mean_psnr /= n;
    rep.mean_ssim /= n;
    rep.mean_mae /= n;
    if (nl > 0) rep.mean_lpips = sl / nl;
    return rep;
}

inline std::string report_csv(const MetricsReport& rep) {
    std::ostringstream out;
    out << "scene_id,psnr_db,ssim,mae,lpips\n";
    char buf[160];
    for (const MetricsRow& r : rep.rows) {
        std::string lp = "";
        if (r.lpips)
            lp = strf("%.6f", *r.lpips);
        else if (r.lpips_failed)
            lp = "error";
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%s\n", r.scene_id.c_str(), r.psnr_db,
                      r.ssim, r.mae, lp.c_str());
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f,%.6f,%s\n", rep.mean_psnr, rep.mean_ssim,
                  rep.mean_mae, rep.mean_lpips ? strf("%.6f", *rep.mean_lpips).c_str() : "");
    out << buf;
    return out.str();
}

/// Published results bundled for side-by-side display:
/// group,method,psnr_db,ssim,mae,lpips,params_m,source per line.
struct ReferenceRow {
    std::string group, method;
    double psnr_db = 0.0, ssim = 0.0, mae = 0.0, lpips = 0.0;
    std::string params_m, source;
};

inline std::vector<ReferenceRow> load_reference_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open reference results file: " + path);
    std::vector<ReferenceRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() < 8) throw DataError(path + ": malformed row: " + line);
        ReferenceRow r;
        r.group = cells[0];
        r.method = cells[1];
        r.psnr_db = std::stod(cells[2]);
        r.ssim = std::stod(cells[3]);
        r.mae = std::stod(cells[4]);
        r.lpips = std::stod(cells[5]);
        r.params_m = cells[6];
        r.source = cells[7];
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Plain-text table: evaluated rows first, then any reference rows.
inline std::string report_table(const MetricsReport& rep,
                                const std::vector<ReferenceRow>& reference = {}) {
    std::ostringstream out;
    char buf[256];
    out << strf("%-28s %8s %8s %8s %8s\n", "scene/method", "PSNR", "SSIM", "MAE", "LPIPS");
    out << std::string(64, '-') << "\n";
    for (const MetricsRow& r : rep.rows) {
        std::string lp = r.lpips ? strf("%8.3f", *r.lpips) : (r.lpips_failed ? "   error" : "       -");
        std::snprintf(buf, sizeof(buf), "%-28s %8.2f %8.3f %8.3f %s\n", r.scene_id.c_str(),
                      r.psnr_db, r.ssim, r.mae, lp.c_str());
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-28s %8.2f %8.3f %8.3f %s\n", "mean", rep.mean_psnr,
                  rep.mean_ssim, rep.mean_mae,
                  rep.mean_lpips ? strf("%8.3f", *rep.mean_lpips).c_str() : "       -");
    out << buf;
    if (!reference.empty()) {
        out << std::string(64, '-') << "\n";
        for (const ReferenceRow& r : reference) {
            std::snprintf(buf, sizeof(buf), "%-28s %8.2f %8.3f %8.3f %8.3f  [%s]\n",
                          (r.method + " (reported)").c_str(), r.psnr_db, r.ssim, r.mae, r.lpips,
                          r.source.c_str());
            out << buf;
        }
    }
    out << std::string(64, '-') << "\n";
    out << "note: SSIM here is computed on Rec.601 luminance with an 11x11\n"
           "Gaussian window; absolute comparisons against numbers computed\n"
           "with other conventions are approximate.\n";
    return out.str();
}

}  // namespace dfl
