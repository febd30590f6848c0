// ============================================================================
// scoring.hpp - per-patch anomaly scores from dictionary reconstruction error
//               (optionally fused with flow NLL), image scores, localization
// ============================================================================

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "texflow/common.hpp"
#include "texflow/dictionary.hpp"
#include "texflow/features.hpp"
#include "texflow/flow.hpp"
#include "texflow/image.hpp"

namespace texflow {

enum class SignalRepresentation { Latent, Raw };

inline SignalRepresentation representation_from_string(const std::string& s) {
    if (s == "latent") return SignalRepresentation::Latent;
    if (s == "raw") return SignalRepresentation::Raw;
    throw ConfigError("unknown representation: " + s + " (expected latent|raw)");
}

struct ScoreConfig {
    double lambda = 0.0;  // flow-NLL fusion weight in [0,1]; 0 = reconstruction only
    int top_k = 5;
    double tau = 0.0;  // anomaly threshold on patch scores
    SignalRepresentation representation = SignalRepresentation::Latent;
    double omp_xi_rel = 0.05;  // OMP stopping tolerance as a fraction of ||signal||
    int omp_k_max = 10;
    std::optional<NllStats> nll_stats;  // frozen at training time; required if lambda > 0

    void check() const {
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("score: lambda must be in [0,1]");
        if (top_k < 1) throw ConfigError("score: top_k must be >= 1");
        if (lambda > 0.0 && !nll_stats)
            throw ConfigError("score: lambda > 0 requires frozen train NLL statistics");
    }
};

// Patch-grid score field; cells are the patch rects in row-major order.
struct AnomalyMap {
    int rows = 0;
    int cols = 0;
    std::vector<Rect> cells;
    Vec scores;

    std::size_t cell_count() const { return scores.size(); }
};

// ----------------------------------------------------------------------------
// Patch scoring
// ----------------------------------------------------------------------------

// Derives the patch-grid geometry from per-row provenance rects.
inline std::pair<int, int> infer_grid(const PatchFeatureSet& feats) {
    std::vector<int> ys, xs;
    for (const auto& p : feats.provenance) {
        ys.push_back(p.rect.y0);
        xs.push_back(p.rect.x0);
    }
    std::sort(ys.begin(), ys.end());
    ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    if (ys.size() * xs.size() != feats.count())
        throw ParameterError("patch_scores: provenance does not form a regular grid");
    return {int(ys.size()), int(xs.size())};
}

// score = (1-lambda) * ||signal - D x_omp||_2 + lambda * normalized NLL, with
// the signal taken in flow latent space by default.
inline AnomalyMap patch_scores(const PatchFeatureSet& feats, const FlowModel& flow,
                               const Dictionary& dict, const ScoreConfig& cfg,
                               int threads = 1) {
    cfg.check();
    if (feats.count() == 0) throw ParameterError("patch_scores: empty feature set");
    if (int(feats.dim) != flow.dim)
        throw ParameterError("patch_scores: feature dim does not match flow dim");
    if (int(feats.dim) != dict.n)
        throw ParameterError("patch_scores: feature dim does not match dictionary dim");

    AnomalyMap map;
    std::tie(map.rows, map.cols) = infer_grid(feats);
    map.cells.resize(feats.count());
    map.scores.assign(feats.count(), 0.0);

    parallel_for(feats.count(), threads, [&](std::size_t k) {
        const Vec x = feats.row(k);
        Vec signal = x;
        double nll = 0.0;
        if (cfg.representation == SignalRepresentation::Latent || cfg.lambda > 0.0) {
            const auto [t, logdet] = flow_forward(flow, x);
            nll = 0.5 * double(flow.dim) * kLogTwoPi + 0.5 * dot(t, t) - logdet;
            if (cfg.representation == SignalRepresentation::Latent) signal = t;
        }
        const double xi = cfg.omp_xi_rel * norm2(signal);
        const SparseCode code = omp(dict, signal, xi, cfg.omp_k_max);
        Vec recon = reconstruct(dict, code);
        for (std::size_t i = 0; i < recon.size(); ++i) recon[i] = signal[i] - recon[i];
        double score = (1.0 - cfg.lambda) * norm2(recon);
        if (cfg.lambda > 0.0) {
            const double normed = std::max(0.0, nll - cfg.nll_stats->median) / cfg.nll_stats->iqr;
            score += cfg.lambda * normed;
        }
        map.scores[k] = score;
        map.cells[k] = feats.provenance[k].rect;
    });
    return map;
}

// ----------------------------------------------------------------------------
// Aggregation, localization, thresholding
// ----------------------------------------------------------------------------

// Mean of the top_k highest patch scores (all cells when the map is smaller).
inline double image_score(const AnomalyMap& map, const ScoreConfig& cfg) {
    if (map.cell_count() == 0) throw ParameterError("image_score: empty map");
    const std::size_t k = std::min<std::size_t>(std::size_t(cfg.top_k), map.cell_count());
    Vec sorted = map.scores;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += sorted[i];
    return s / double(k);
}

struct LocalizedRegion {
    std::vector<std::pair<int, int>> cells;  // (row, col), selection order
    Rect bbox;                               // pixel-space union bounding box
};

// Union of the top_k highest-scoring cells; ties resolve in row-major order.
inline LocalizedRegion localize(const AnomalyMap& map, const ScoreConfig& cfg) {
    if (std::size_t(cfg.top_k) > map.cell_count())
        throw ParameterError("localize: top_k exceeds cell count");
    std::vector<std::size_t> idx(map.cell_count());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (map.scores[a] != map.scores[b]) return map.scores[a] > map.scores[b];
        return a < b;  // row-major tie-break
    });

    LocalizedRegion region;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    for (int i = 0; i < cfg.top_k; ++i) {
        const std::size_t cell = idx[std::size_t(i)];
        const Rect& r = map.cells[cell];
        region.cells.emplace_back(int(cell) / map.cols, int(cell) % map.cols);
        if (i == 0) {
            x0 = r.x0;
            y0 = r.y0;
            x1 = r.x0 + r.w;
            y1 = r.y0 + r.h;
        } else {
            x0 = std::min(x0, r.x0);
            y0 = std::min(y0, r.y0);
            x1 = std::max(x1, r.x0 + r.w);
            y1 = std::max(y1, r.y0 + r.h);
        }
    }
    region.bbox = Rect{x0, y0, x1 - x0, y1 - y0};
    return region;
}

// Cell marked anomalous iff score > tau.
inline std::vector<std::uint8_t> threshold_map(const AnomalyMap& map, double tau) {
    if (tau < 0.0) throw ParameterError("threshold_map: tau must be >= 0");
    std::vector<std::uint8_t> mask(map.cell_count(), 0);
    for (std::size_t i = 0; i < map.cell_count(); ++i) mask[i] = map.scores[i] > tau ? 1 : 0;
    return mask;
}

// Percentile calibration over training-normal patch scores (default 95th).
inline double calibrate_threshold(Vec normal_scores, double percentile = 0.95) {
    if (normal_scores.empty()) throw ParameterError("calibrate_threshold: no scores");
    std::sort(normal_scores.begin(), normal_scores.end());
    return percentile_sorted(normal_scores, percentile);
}

// ----------------------------------------------------------------------------
// Exports: PGM heatmap (min-max scaled) and CSV artifacts
// ----------------------------------------------------------------------------

inline void write_heatmap_pgm(const AnomalyMap& map, const std::string& path) {
    Image img(map.rows, map.cols, 1);
    double lo = map.scores.empty() ? 0.0 : map.scores[0];
    double hi = lo;
    for (double s : map.scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    const double span = hi - lo;
    for (std::size_t i = 0; i < map.cell_count(); ++i)
        img.data[i] = span > 0.0 ? (map.scores[i] - lo) / span : 0.0;
    save_image(img, path);
}

inline void write_map_csv(const AnomalyMap& map, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParameterError("cannot write anomaly map CSV: " + path);
    out << "row,col,x0,y0,score\n";
    for (std::size_t i = 0; i < map.cell_count(); ++i) {
        const Rect& r = map.cells[i];
        out << (i / std::size_t(map.cols)) << ',' << (i % std::size_t(map.cols)) << ','
            << r.x0 << ',' << r.y0 << ',' << fmt_double(map.scores[i]) << '\n';
    }
}

inline void write_region_csv(const LocalizedRegion& region, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParameterError("cannot write region CSV: " + path);
    out << "x0,y0,w,h\n";
    out << region.bbox.x0 << ',' << region.bbox.y0 << ',' << region.bbox.w << ','
        << region.bbox.h << '\n';
}

}  // namespace texflow
