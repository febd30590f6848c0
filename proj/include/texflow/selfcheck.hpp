// ============================================================================
// selfcheck.hpp - independent numeric oracles (finite differences, pair
//                 counting) and the aggregate self-check suite
// ============================================================================

#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "texflow/common.hpp"
#include "texflow/dictionary.hpp"
#include "texflow/eval.hpp"
#include "texflow/features.hpp"
#include "texflow/flow.hpp"
#include "texflow/linalg.hpp"
#include "texflow/texgen.hpp"

namespace texflow {

// ----------------------------------------------------------------------------
// Finite-difference Jacobian oracle: differentiates an arbitrary vector map
// numerically, then takes log|det| by LU. Never touches the analytic log-det.
// ----------------------------------------------------------------------------

inline double fd_jacobian_log_abs_det(const std::function<Vec(const Vec&)>& map, const Vec& x,
                                      double h = 1e-6) {
    const std::size_t n = x.size();
    Mat jac(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        Vec xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        const Vec fp = map(xp);
        const Vec fm = map(xm);
        for (std::size_t i = 0; i < n; ++i) jac(i, j) = (fp[i] - fm[i]) / (2.0 * h);
    }
    return lu_log_abs_det(std::move(jac));
}

// ----------------------------------------------------------------------------
// Mann-Whitney pair counting with 0.5 tie weight; the independent AUC oracle.
// ----------------------------------------------------------------------------

inline double mann_whitney_auc(const std::vector<double>& scores,
                               const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ParameterError("mann_whitney_auc: length mismatch");
    std::uint64_t wins2 = 0;  // 2*(anomaly > normal) + 1*(tie)
    std::uint64_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        ++n_pos;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j])
                wins2 += 2;
            else if (scores[i] == scores[j])
                wins2 += 1;
        }
    }
    for (int l : labels) n_neg += (l == 0);
    if (n_pos == 0 || n_neg == 0)
        throw ParameterError("mann_whitney_auc: both classes must be present");
    return double(wins2) / (2.0 * double(n_pos) * double(n_neg));
}

// ----------------------------------------------------------------------------
// Flow parameter gradients vs central finite differences of the batch loss.
// ----------------------------------------------------------------------------

struct FlowGradCheckResult {
    double worst_rel_err = 0.0;
    std::string worst_group;
};

inline FlowGradCheckResult flow_grad_check(const FlowModel& model, const PatchFeatureSet& batch,
                                           double tolerance,
                                           std::size_t max_coords_per_group = 64) {
    const double h = 1e-5;
    FlowModel probe = model;

    FlowGrads analytic(probe);
    for (std::size_t k = 0; k < batch.count(); ++k) {
        FlowCache cache;
        flow_forward_cached(probe, batch.row(k), cache);
        flow_backward(probe, cache, analytic);
    }
    const double inv = 1.0 / double(batch.count());
    flow_for_each_grad(analytic, [&](const std::string&, Vec& g) {
        for (auto& v : g) v *= inv;
    });

    auto loss_at = [&]() { return nf_loss(probe, batch); };

    std::vector<std::pair<std::string, Vec*>> params;
    flow_for_each_param(probe, [&](const std::string& name, Vec& v) {
        params.emplace_back(name, &v);
    });
    std::vector<Vec*> grads;
    flow_for_each_grad(analytic, [&](const std::string&, Vec& v) { grads.push_back(&v); });

    FlowGradCheckResult result;
    for (std::size_t gi = 0; gi < params.size(); ++gi) {
        Vec& p = *params[gi].second;
        const Vec& ag = *grads[gi];
        std::vector<std::size_t> coords(p.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (coords.size() > max_coords_per_group) {
            Rng rng(0xF10DULL + gi);
            rng.shuffle(coords);
            coords.resize(max_coords_per_group);
        }
        double max_abs = 0.0, scale = 0.0;
        for (std::size_t ci : coords) {
            const double saved = p[ci];
            p[ci] = saved + h;
            const double lp = loss_at();
            p[ci] = saved - h;
            const double lm = loss_at();
            p[ci] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            max_abs = std::max(max_abs, std::fabs(fd - ag[ci]));
            scale = std::max({scale, std::fabs(fd), std::fabs(ag[ci])});
        }
        const double rel = max_abs / std::max(scale, 1e-10);
        if (rel > result.worst_rel_err) {
            result.worst_rel_err = rel;
            result.worst_group = params[gi].first;
        }
    }
    if (result.worst_rel_err > tolerance)
        throw CheckFailedError("flow gradient check failed: worst group " + result.worst_group +
                               " relative error " + fmt_double(result.worst_rel_err));
    return result;
}

// ----------------------------------------------------------------------------
// Aggregate self-check suite (used by the `selfcheck` CLI subcommand)
// ----------------------------------------------------------------------------

inline bool run_selfcheck(std::ostream& out) {
    int failures = 0;
    auto check = [&](const std::string& name, const std::function<bool()>& fn) {
        bool ok = false;
        std::string detail;
        try {
            ok = fn();
        } catch (const std::exception& e) {
            detail = e.what();
        }
        out << (ok ? "PASS" : "FAIL") << "  " << name;
        if (!ok && !detail.empty()) out << "  (" << detail << ")";
        out << "\n";
        if (!ok) ++failures;
        return ok;
    };

    check("extractor gradients vs finite differences", [] {
        ExtractorConfig cfg;
        cfg.input_size = 16;
        cfg.widths = {4, 6, 8};
        cfg.feature_dim = 12;
        Extractor ex = Extractor::init(cfg, 99);
        Image patch(16, 16, 1);
        Rng rng(123);
        for (auto& v : patch.data) v = rng.uniform();
        grad_check(ex, patch, 1e-4, 64);
        return true;
    });

    check("coupling log-det vs finite-difference Jacobian (D=4)", [] {
        Rng rng(7);
        FlowModel f = make_flow(4, 3, 3.0, 21);
        flow_for_each_param(f, [&](const std::string&, Vec& v) {
            for (auto& x : v) x = rng.uniform(-0.4, 0.4);
        });
        for (int trial = 0; trial < 5; ++trial) {
            Vec x(4);
            for (auto& v : x) v = rng.normal();
            const double analytic = flow_forward(f, x).second;
            const double fd = fd_jacobian_log_abs_det(
                [&](const Vec& v) { return flow_forward(f, v).first; }, x);
            if (std::fabs(analytic - fd) / std::max(1.0, std::fabs(fd)) > 1e-4) return false;
        }
        return true;
    });

    check("flow inverse round trip (D=8)", [] {
        Rng rng(11);
        FlowModel f = make_flow(8, 4, 3.0, 33);
        flow_for_each_param(f, [&](const std::string&, Vec& v) {
            for (auto& x : v) x = rng.uniform(-0.3, 0.3);
        });
        for (int trial = 0; trial < 50; ++trial) {
            Vec x(8);
            for (auto& v : x) v = rng.normal();
            const Vec back = flow_inverse(f, flow_forward(f, x).first);
            for (std::size_t i = 0; i < x.size(); ++i)
                if (std::fabs(back[i] - x[i]) > 1e-9) return false;
        }
        return true;
    });

    check("nf_loss / log-likelihood identity", [] {
        Rng rng(5);
        FlowModel f = make_flow(6, 3, 3.0, 44);
        flow_for_each_param(f, [&](const std::string&, Vec& v) {
            for (auto& x : v) x = rng.uniform(-0.3, 0.3);
        });
        PatchFeatureSet batch;
        for (int k = 0; k < 8; ++k) {
            Vec x(6);
            for (auto& v : x) v = rng.normal();
            batch.append(x, FeatureProvenance{"s", Rect{0, 0, 1, 1}});
        }
        double mean_ll = 0.0;
        for (std::size_t k = 0; k < batch.count(); ++k)
            mean_ll += log_likelihood(f, batch.row(k));
        mean_ll /= double(batch.count());
        const double identity =
            nf_loss(f, batch) + 0.5 * 6.0 * kLogTwoPi - (-mean_ll);
        return std::fabs(identity) < 1e-12;
    });

    check("flow parameter gradients vs finite differences", [] {
        Rng rng(17);
        FlowModel f = make_flow(4, 2, 3.0, 55);
        flow_for_each_param(f, [&](const std::string&, Vec& v) {
            for (auto& x : v) x = rng.uniform(-0.4, 0.4);
        });
        PatchFeatureSet batch;
        for (int k = 0; k < 4; ++k) {
            Vec x(4);
            for (auto& v : x) v = rng.normal();
            batch.append(x, FeatureProvenance{"s", Rect{0, 0, 1, 1}});
        }
        flow_grad_check(f, batch, 1e-4);
        return true;
    });

    check("OMP identity dictionary + exhaustive spot check", [] {
        Dictionary ident;
        ident.n = ident.m = 4;
        ident.atoms = Mat(4, 4, 0.0);
        for (int i = 0; i < 4; ++i) ident.atoms(i, i) = 1.0;
        const SparseCode code = omp(ident, Vec{0.0, 0.0, 3.0, 0.0}, 1e-9, 4);
        if (code.support != std::vector<int>{2}) return false;
        if (std::fabs(code.coefficients[0] - 3.0) > 1e-9) return false;

        Rng rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            Dictionary d;
            d.n = 5;
            d.m = 8;
            d.atoms = Mat(5, 8);
            for (int j = 0; j < d.m; ++j) {
                Vec col(5);
                for (auto& v : col) v = rng.normal();
                const double nn = norm2(col);
                for (int i = 0; i < d.n; ++i) d.atoms(i, j) = col[i] / nn;
            }
            Vec y(5, 0.0);
            const int a0 = int(rng.uniform_int(0, 7));
            int a1 = int(rng.uniform_int(0, 7));
            while (a1 == a0) a1 = int(rng.uniform_int(0, 7));
            for (int i = 0; i < d.n; ++i)
                y[i] = 1.3 * d.atoms(i, a0) - 0.8 * d.atoms(i, a1);
            const SparseCode c = omp(d, y, 1e-9, 2);
            Vec recon = reconstruct(d, c);
            for (int i = 0; i < d.n; ++i) recon[i] -= y[i];
            if (norm2(recon) > 1e-8) return false;
        }
        return true;
    });

    check("ISTA objective monotonicity", [] {
        Rng rng(41);
        Dictionary d;
        d.n = 6;
        d.m = 12;
        d.atoms = Mat(6, 12);
        for (int j = 0; j < d.m; ++j) {
            Vec col(6);
            for (auto& v : col) v = rng.normal();
            const double nn = norm2(col);
            for (int i = 0; i < d.n; ++i) d.atoms(i, j) = col[i] / nn;
        }
        Vec y(6);
        for (auto& v : y) v = rng.normal();
        std::vector<double> history;
        lasso_solve(d, y, 0.1, 80, nullptr, &history);
        for (std::size_t i = 1; i < history.size(); ++i)
            if (history[i] > history[i - 1] + 1e-12) return false;
        return true;
    });

    check("AUC trapezoid equals Mann-Whitney pair count", [] {
        Rng rng(61);
        for (int trial = 0; trial < 50; ++trial) {
            const int n = 3 + int(rng.uniform_int(0, 12));
            std::vector<double> scores;
            std::vector<int> labels;
            bool has0 = false, has1 = false;
            for (int i = 0; i < n; ++i) {
                scores.push_back(double(rng.uniform_int(0, 5)) / 4.0);  // force ties
                const int l = int(rng.uniform_int(0, 1));
                labels.push_back(l);
                has0 |= l == 0;
                has1 |= l == 1;
            }
            if (!has0 || !has1) continue;
            if (auc(scores, labels) != mann_whitney_auc(scores, labels)) return false;
        }
        return true;
    });

    check("CutPaste locality and content equality", [] {
        const Image img = generate_texture(TextureKind::SineGrid, 64, 8, 0.05, 3);
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const CutPasteResult r = cutpaste(img, CutPasteParams{}, seed);
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x) {
                    const bool in_dst = x >= r.dst.x0 && x < r.dst.x0 + r.dst.w &&
                                        y >= r.dst.y0 && y < r.dst.y0 + r.dst.h;
                    if (in_dst) {
                        const double want =
                            img.at(r.src.y0 + (y - r.dst.y0), r.src.x0 + (x - r.dst.x0));
                        if (r.image.at(y, x) != want) return false;
                    } else if (r.image.at(y, x) != img.at(y, x)) {
                        return false;
                    }
                }
        }
        return true;
    });

    return failures == 0;
}

}  // namespace texflow
