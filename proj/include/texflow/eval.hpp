// ============================================================================
// eval.hpp - ROC curves, AUC and experiment reports
// ============================================================================

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "texflow/common.hpp"

namespace texflow {

// Labels: 1 = anomalous (positive class), 0 = normal.

struct RocCurve {
    std::vector<std::pair<double, double>> points;  // (fpr, tpr) along the sweep
};

namespace detail {

// Per distinct score (descending): counts of positives/negatives at that
// score. Shared by roc_curve and auc so both see identical grouping.
inline std::vector<std::pair<std::size_t, std::size_t>> score_groups(
    const std::vector<double>& scores, const std::vector<int>& labels, std::size_t& n_pos,
    std::size_t& n_neg) {
    if (scores.size() != labels.size())
        throw ParameterError("roc: scores/labels length mismatch");
    if (scores.empty()) throw ParameterError("roc: empty input");

    std::map<double, std::pair<std::size_t, std::size_t>, std::greater<double>> groups;
    n_pos = n_neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw ParameterError("roc: non-finite score");
        auto& g = groups[scores[i]];
        if (labels[i] == 1) {
            ++g.first;
            ++n_pos;
        } else if (labels[i] == 0) {
            ++g.second;
            ++n_neg;
        } else {
            throw ParameterError("roc: labels must be 0 (normal) or 1 (anomalous)");
        }
    }
    if (n_pos == 0 || n_neg == 0)
        throw ParameterError("roc: both classes must be present");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(groups.size());
    for (const auto& [score, counts] : groups) out.push_back(counts);
    return out;
}

}  // namespace detail

// Threshold sweep over the distinct scores, highest first; anomalous is the
// positive class. The curve starts at (0,0) and ends at (1,1).
inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::size_t n_pos = 0, n_neg = 0;
    const auto groups = detail::score_groups(scores, labels, n_pos, n_neg);

    RocCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    std::size_t tp = 0, fp = 0;
    for (const auto& [pos, neg] : groups) {
        tp += pos;
        fp += neg;
        curve.points.emplace_back(double(fp) / double(n_neg), double(tp) / double(n_pos));
    }
    return curve;
}

// Trapezoidal area under the ROC curve. The numerator is accumulated in
// integers, so the result is bit-identical to the Mann-Whitney pair count
// with ties weighted 0.5.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::size_t n_pos = 0, n_neg = 0;
    const auto groups = detail::score_groups(scores, labels, n_pos, n_neg);

    std::uint64_t numerator = 0;  // sum of dFP * (TP_before + TP_after)
    std::size_t tp = 0;
    for (const auto& [pos, neg] : groups) {
        numerator += std::uint64_t(neg) * (2 * std::uint64_t(tp) + std::uint64_t(pos));
        tp += pos;
    }
    return double(numerator) / (2.0 * double(n_pos) * double(n_neg));
}

// ----------------------------------------------------------------------------
// Experiment report
// ----------------------------------------------------------------------------

struct ScoreRow {
    std::string id;
    int label = 0;
    double score = 0.0;
};

struct ExperimentReport {
    std::string category;
    double auc_value = 0.0;
    std::vector<ScoreRow> scores;
    RocCurve roc;
    std::string config_snapshot;  // JSON text
    std::uint64_t seed = 0;
    double runtime_seconds = 0.0;  // informational only; kept out of the CSV artifacts
};

// Writes report.csv, scores.csv, roc.csv and config.json into `dir`.
inline void write_report(const ExperimentReport& report, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    {
        std::ofstream out(fs::path(dir) / "report.csv");
        if (!out) throw ParameterError("cannot write report.csv under " + dir);
        out << "category,auc\n";
        out << report.category << ',' << fmt_double(report.auc_value) << '\n';
    }
    {
        std::ofstream out(fs::path(dir) / "scores.csv");
        if (!out) throw ParameterError("cannot write scores.csv under " + dir);
        out << "id,label,score\n";
        for (const auto& row : report.scores)
            out << row.id << ',' << (row.label == 1 ? "anomalous" : "normal") << ','
                << fmt_double(row.score) << '\n';
    }
    {
        std::ofstream out(fs::path(dir) / "roc.csv");
        if (!out) throw ParameterError("cannot write roc.csv under " + dir);
        out << "fpr,tpr\n";
        for (const auto& [fpr, tpr] : report.roc.points)
            out << fmt_double(fpr) << ',' << fmt_double(tpr) << '\n';
    }
    {
        std::ofstream out(fs::path(dir) / "config.json");
        if (!out) throw ParameterError("cannot write config.json under " + dir);
        out << report.config_snapshot;
        if (report.config_snapshot.empty() || report.config_snapshot.back() != '\n') out << '\n';
    }
}

}  // namespace texflow
