// ============================================================================
// dictionary.hpp - dictionary learning and sparse coding: OMP inference,
//                  ISTA coefficient solves, MOD dictionary updates
// ============================================================================

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "texflow/common.hpp"
#include "texflow/features.hpp"
#include "texflow/linalg.hpp"

namespace texflow {

// ----------------------------------------------------------------------------
// Types
// ----------------------------------------------------------------------------

// Overcomplete dictionary: N x M matrix whose M columns (atoms) are unit-norm.
struct Dictionary {
    int n = 0;  // signal dimension
    int m = 0;  // atom count
    Mat atoms;  // n rows x m cols

    Vec atom(int j) const {
        Vec col(n);
        for (int i = 0; i < n; ++i) col[i] = atoms(i, j);
        return col;
    }

    void check_unit_norm(double tol = 1e-12) const {
        for (int j = 0; j < m; ++j) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += atoms(i, j) * atoms(i, j);
            if (std::fabs(std::sqrt(s) - 1.0) > tol)
                throw CheckFailedError("dictionary atom " + std::to_string(j) +
                                       " is not unit norm");
        }
    }
};

struct SparseCode {
    int dim = 0;                // M
    std::vector<int> support;   // sorted unique atom indices
    Vec coefficients;           // one per support entry

    std::size_t nnz() const { return support.size(); }

    Vec to_dense() const {
        Vec x(dim, 0.0);
        for (std::size_t i = 0; i < support.size(); ++i) x[support[i]] = coefficients[i];
        return x;
    }
};

struct DictLearnConfig {
    int atom_count = 0;        // M; defaults to 2N when zero
    double beta = 0.1;         // L1 weight
    double xi_rel = 0.05;      // OMP residual tolerance as a fraction of ||y||
    int k_max = 10;            // max sparsity for OMP
    int iters = 30;            // alternations
    int ista_iters = 100;      // inner ISTA iterations per signal
    std::uint64_t seed = 0;
};

inline Vec reconstruct(const Dictionary& d, const SparseCode& code) {
    if (code.dim != d.m) throw ParameterError("reconstruct: code dim does not match dictionary");
    Vec y(d.n, 0.0);
    for (std::size_t i = 0; i < code.support.size(); ++i) {
        const int j = code.support[i];
        const double c = code.coefficients[i];
        for (int r = 0; r < d.n; ++r) y[r] += c * d.atoms(r, j);
    }
    return y;
}

// ----------------------------------------------------------------------------
// Orthogonal matching pursuit: greedy solver for
//   min ||x||_0  s.t.  ||y - Dx||_2 <= xi
// ----------------------------------------------------------------------------

inline SparseCode omp(const Dictionary& d, const Vec& y, double xi, int k_max) {
    if (int(y.size()) != d.n) throw ParameterError("omp: signal dim does not match dictionary");
    for (double v : y)
        if (!std::isfinite(v)) throw ParameterError("omp: non-finite signal");
    if (k_max < 0) throw ParameterError("omp: k_max must be non-negative");

    SparseCode code;
    code.dim = d.m;
    Vec residual = y;
    double res_norm = norm2(residual);
    std::vector<bool> used(std::size_t(d.m), false);
    std::vector<int> support;

    while (res_norm > xi && int(support.size()) < k_max) {
        // pick the atom most correlated with the residual
        int best = -1;
        double best_corr = 0.0;
        for (int j = 0; j < d.m; ++j) {
            if (used[j]) continue;
            double c = 0.0;
            for (int i = 0; i < d.n; ++i) c += residual[i] * d.atoms(i, j);
            if (std::fabs(c) > best_corr) {
                best_corr = std::fabs(c);
                best = j;
            }
        }
        if (best < 0 || best_corr < 1e-14) break;  // residual orthogonal to all atoms
        used[best] = true;
        support.push_back(best);

        // least-squares refit on the active support via normal equations
        const std::size_t k = support.size();
        Mat gram(k, k);
        Vec rhs(k);
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t q = 0; q <= p; ++q) {
                double g = 0.0;
                for (int i = 0; i < d.n; ++i)
                    g += d.atoms(i, support[p]) * d.atoms(i, support[q]);
                gram(p, q) = g;
                gram(q, p) = g;
            }
            double r = 0.0;
            for (int i = 0; i < d.n; ++i) r += d.atoms(i, support[p]) * y[i];
            rhs[p] = r;
        }
        Vec coef;
        try {
            coef = cholesky_solve(gram, rhs);
        } catch (const NumericError&) {
            // nearly collinear support; retry with a tiny ridge
            for (std::size_t p = 0; p < k; ++p) gram(p, p) += 1e-10;
            coef = cholesky_solve(std::move(gram), std::move(rhs));
        }

        residual = y;
        for (std::size_t p = 0; p < k; ++p)
            for (int i = 0; i < d.n; ++i) residual[i] -= coef[p] * d.atoms(i, support[p]);
        res_norm = norm2(residual);

        code.support = support;
        code.coefficients = coef;
    }

    // keep support sorted with coefficients aligned
    std::vector<std::size_t> idx(code.support.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return code.support[a] < code.support[b]; });
    SparseCode sorted;
    sorted.dim = code.dim;
    for (std::size_t i : idx) {
        sorted.support.push_back(code.support[i]);
        sorted.coefficients.push_back(code.coefficients[i]);
    }
    return sorted;
}

// ----------------------------------------------------------------------------
// ISTA for the L1-penalized subproblem
//   min_x 0.5*||y - Dx||^2 + beta*||x||_1
// ----------------------------------------------------------------------------

inline double lasso_objective(const Dictionary& d, const Vec& y, const Vec& x, double beta) {
    Vec r = matvec(d.atoms, x);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
    double l1 = 0.0;
    for (double v : x) l1 += std::fabs(v);
    return 0.5 * dot(r, r) + beta * l1;
}

inline SparseCode lasso_solve(const Dictionary& d, const Vec& y, double beta, int iters,
                              const Vec* warm_start = nullptr,
                              std::vector<double>* objective_history = nullptr) {
    if (int(y.size()) != d.n)
        throw ParameterError("lasso_solve: signal dim does not match dictionary");
    if (iters < 1) throw ParameterError("lasso_solve: iters must be >= 1");
    if (beta <= 0.0) throw ParameterError("lasso_solve: beta must be positive");

    // step 1/L with L a slight overestimate of the Gram spectral norm, so the
    // majorization argument (objective non-increase) holds per iteration
    const double lipschitz = gram_spectral_norm(d.atoms) * 1.01 + 1e-12;
    if (!std::isfinite(lipschitz) || lipschitz <= 0.0)
        throw NumericError("lasso_solve: non-finite step size");
    const double eta = 1.0 / lipschitz;
    const double thresh = eta * beta;

    Vec x = warm_start ? *warm_start : Vec(std::size_t(d.m), 0.0);
    if (warm_start && int(warm_start->size()) != d.m)
        throw ParameterError("lasso_solve: warm start has wrong dimension");

    for (int it = 0; it < iters; ++it) {
        Vec r = matvec(d.atoms, x);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
        const Vec grad = matTvec(d.atoms, r);
        for (int j = 0; j < d.m; ++j) {
            const double z = x[j] - eta * grad[j];
            x[j] = z > thresh ? z - thresh : (z < -thresh ? z + thresh : 0.0);
        }
        if (objective_history) objective_history->push_back(lasso_objective(d, y, x, beta));
    }

    SparseCode code;
    code.dim = d.m;
    for (int j = 0; j < d.m; ++j) {
        if (x[j] != 0.0) {
            code.support.push_back(j);
            code.coefficients.push_back(x[j]);
        }
    }
    return code;
}

// ----------------------------------------------------------------------------
// MOD dictionary update: D <- Y X^T (X X^T + lambda I)^-1, columns
// renormalized to unit L2; dead atoms are re-seeded from training signals.
// ----------------------------------------------------------------------------

struct ModUpdateResult {
    Dictionary dictionary;
    Vec column_scales;  // per-atom norms before renormalization (for code rescale)
};

inline ModUpdateResult dict_update(const Dictionary& d, const std::vector<Vec>& signals,
                                   const std::vector<Vec>& codes, Rng& reseed_rng) {
    const std::size_t k = signals.size();
    if (k == 0 || codes.size() != k)
        throw ParameterError("dict_update: signals/codes size mismatch");
    bool any_nonzero = false;
    for (const auto& c : codes)
        for (double v : c)
            if (v != 0.0) any_nonzero = true;

    Dictionary out = d;
    Vec scales(std::size_t(d.m), 1.0);

    if (any_nonzero) {
        // normal equations: (X X^T + lambda I) in M x M, rhs Y X^T column blocks
        Mat xxT(std::size_t(d.m), std::size_t(d.m), 0.0);
        Mat yxT(std::size_t(d.n), std::size_t(d.m), 0.0);
        for (std::size_t s = 0; s < k; ++s) {
            const Vec& x = codes[s];
            const Vec& y = signals[s];
            for (int p = 0; p < d.m; ++p) {
                if (x[p] == 0.0) continue;
                for (int q = 0; q < d.m; ++q) xxT(p, q) += x[p] * x[q];
                for (int i = 0; i < d.n; ++i) yxT(i, p) += y[i] * x[p];
            }
        }
        for (int p = 0; p < d.m; ++p) xxT(p, p) += 1e-8;

        // solve row-wise: D_new(i,:) solves (X X^T) z = (Y X^T)(i,:)
        for (int i = 0; i < d.n; ++i) {
            Vec rhs(std::size_t(d.m));
            for (int p = 0; p < d.m; ++p) rhs[p] = yxT(i, p);
            Vec row = cholesky_solve(xxT, std::move(rhs));
            for (int p = 0; p < d.m; ++p) out.atoms(i, p) = row[p];
        }
    }

    // track atom usage (an atom is dead if no code ever selects it)
    std::vector<bool> atom_used(std::size_t(d.m), false);
    for (const auto& c : codes)
        for (int j = 0; j < d.m; ++j)
            if (c[j] != 0.0) atom_used[j] = true;

    for (int j = 0; j < d.m; ++j) {
        double nrm = 0.0;
        for (int i = 0; i < d.n; ++i) nrm += out.atoms(i, j) * out.atoms(i, j);
        nrm = std::sqrt(nrm);
        if (!atom_used[j] || nrm < 1e-10) {
            // re-seed from a random training signal
            const Vec& src = signals[std::size_t(reseed_rng.uniform_int(0, std::int64_t(k) - 1))];
            double sn = norm2(src);
            if (sn < 1e-12) {
                for (int i = 0; i < d.n; ++i) out.atoms(i, j) = reseed_rng.normal();
                sn = 0.0;
                for (int i = 0; i < d.n; ++i) sn += out.atoms(i, j) * out.atoms(i, j);
                sn = std::sqrt(sn);
            } else {
                for (int i = 0; i < d.n; ++i) out.atoms(i, j) = src[i];
            }
            for (int i = 0; i < d.n; ++i) out.atoms(i, j) /= sn;
            scales[j] = 0.0;  // codes for re-seeded atoms are meaningless
        } else {
            for (int i = 0; i < d.n; ++i) out.atoms(i, j) /= nrm;
            scales[j] = nrm;
        }
        if (!std::isfinite(scales[j]))
            throw NumericError("dict_update: non-finite atom after update");
    }
    return {std::move(out), std::move(scales)};
}

// ----------------------------------------------------------------------------
// Alternating minimization (lasso codes / MOD update)
// ----------------------------------------------------------------------------

struct DictLearnResult {
    Dictionary dictionary;
    std::vector<double> objective_history;  // one entry per alternation
    bool size_warning = false;              // K < M
};

inline Dictionary init_dictionary_from_signals(const std::vector<Vec>& signals, int n, int m,
                                               Rng& rng) {
    Dictionary d;
    d.n = n;
    d.m = m;
    d.atoms = Mat(std::size_t(n), std::size_t(m), 0.0);
    // draw M distinct signals when possible, reuse otherwise
    std::vector<std::size_t> order(signals.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (int j = 0; j < m; ++j) {
        const Vec& src = signals[order[std::size_t(j) % order.size()]];
        double nrm = norm2(src);
        if (nrm < 1e-12) {
            Vec noise(std::size_t(n), 0.0);
            for (auto& v : noise) v = rng.normal();
            const double nn = norm2(noise);
            for (int i = 0; i < n; ++i) d.atoms(i, j) = noise[i] / nn;
        } else {
            for (int i = 0; i < n; ++i) d.atoms(i, j) = src[i] / nrm;
        }
    }
    return d;
}

inline double dict_objective(const Dictionary& d, const std::vector<Vec>& signals,
                             const std::vector<Vec>& codes, double beta) {
    double total = 0.0;
    for (std::size_t s = 0; s < signals.size(); ++s) {
        Vec r = matvec(d.atoms, codes[s]);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= signals[s][i];
        double l1 = 0.0;
        for (double v : codes[s]) l1 += std::fabs(v);
        total += 0.5 * dot(r, r) + beta * l1;
    }
    return total;
}

inline DictLearnResult learn(const std::vector<Vec>& signals, DictLearnConfig cfg,
                             int threads = 1) {
    if (signals.empty()) throw ParameterError("learn: no training signals");
    const int n = int(signals[0].size());
    for (const auto& s : signals)
        if (int(s.size()) != n) throw ParameterError("learn: inconsistent signal dims");
    if (cfg.atom_count == 0) cfg.atom_count = 2 * n;
    if (cfg.atom_count < n) throw ParameterError("learn: atom count must be >= signal dim");
    if (cfg.beta <= 0.0) throw ParameterError("learn: beta must be positive");
    if (cfg.iters < 1) throw ParameterError("learn: iters must be >= 1");

    DictLearnResult result;
    result.size_warning = int(signals.size()) < cfg.atom_count;

    Rng rng(stage_seed(cfg.seed, "dict-init"));
    Dictionary dict = init_dictionary_from_signals(signals, n, cfg.atom_count, rng);
    Rng reseed_rng(stage_seed(cfg.seed, "dict-reseed"));

    std::vector<Vec> codes(signals.size(), Vec(std::size_t(cfg.atom_count), 0.0));
    Dictionary prev_dict;
    std::vector<Vec> prev_codes;

    auto lasso_pass = [&](const Dictionary& d, const std::vector<Vec>& warm) {
        std::vector<Vec> out(signals.size());
        parallel_for(signals.size(), threads, [&](std::size_t s) {
            out[s] = lasso_solve(d, signals[s], cfg.beta, cfg.ista_iters, &warm[s]).to_dense();
        });
        return out;
    };

    for (int iter = 0; iter < cfg.iters; ++iter) {
        // sparse step: warm-started ISTA per signal
        std::vector<Vec> new_codes = lasso_pass(dict, codes);
        double objective = dict_objective(dict, signals, new_codes, cfg.beta);
        if (!std::isfinite(objective))
            throw NumericError("learn: non-finite objective at iteration " +
                               std::to_string(iter));

        // The column renormalization in the MOD step rescales coefficient
        // rows, so the refit objective is not guaranteed to drop. If the last
        // update turned out bad after refitting, roll it back and continue
        // from the previous dictionary; the warm-started refit then descends
        // the recorded objective by construction.
        if (iter > 0 && objective > result.objective_history.back()) {
            dict = std::move(prev_dict);
            new_codes = lasso_pass(dict, prev_codes);
            objective = dict_objective(dict, signals, new_codes, cfg.beta);
        }
        codes = std::move(new_codes);
        result.objective_history.push_back(objective);

        if (iter + 1 < cfg.iters) {
            prev_dict = dict;
            prev_codes = codes;
            ModUpdateResult upd = dict_update(dict, signals, codes, reseed_rng);
            dict = std::move(upd.dictionary);
            // rescale codes so D x is preserved across column renormalization
            for (auto& c : codes)
                for (int j = 0; j < cfg.atom_count; ++j) c[j] *= upd.column_scales[j];
        }
    }

    dict.check_unit_norm(1e-9);
    result.dictionary = std::move(dict);
    return result;
}

inline DictLearnResult learn(const PatchFeatureSet& feats, const DictLearnConfig& cfg,
                             int threads = 1) {
    if (feats.count() == 0) throw ParameterError("learn: empty feature set");
    std::vector<Vec> signals(feats.count());
    for (std::size_t k = 0; k < feats.count(); ++k) signals[k] = feats.row(k);
    return learn(signals, cfg, threads);
}

// ----------------------------------------------------------------------------
// TXDL checkpoint: magic "TXDL", N u32, M u32, then the N x M atom matrix as
// little-endian f64, one atom (column) at a time.
// ----------------------------------------------------------------------------

inline void save_dictionary(const Dictionary& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParameterError("save_dictionary: cannot open " + path);
    out.write("TXDL", 4);
    write_le<std::uint32_t>(out, std::uint32_t(d.n));
    write_le<std::uint32_t>(out, std::uint32_t(d.m));
    for (int j = 0; j < d.m; ++j)
        for (int i = 0; i < d.n; ++i) write_le<double>(out, d.atoms(i, j));
    if (!out) throw ParameterError("save_dictionary: short write to " + path);
}

inline Dictionary load_dictionary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParameterError("load_dictionary: cannot open " + path);
    std::size_t offset = 0;
    expect_magic(in, offset, "TXDL", "dictionary checkpoint");
    Dictionary d;
    d.n = int(read_le<std::uint32_t>(in, offset, "signal dim"));
    d.m = int(read_le<std::uint32_t>(in, offset, "atom count"));
    if (d.n < 1 || d.m < 1) throw FormatError("TXDL with invalid geometry", offset);
    d.atoms = Mat(std::size_t(d.n), std::size_t(d.m), 0.0);
    for (int j = 0; j < d.m; ++j)
        for (int i = 0; i < d.n; ++i) d.atoms(i, j) = read_le<double>(in, offset, "atom value");
    return d;
}

inline void write_objective_history_csv(const std::vector<double>& history,
                                        const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParameterError("cannot write objective history: " + path);
    out << "iteration,objective\n";
    for (std::size_t i = 0; i < history.size(); ++i)
        out << i << ',' << fmt_double(history[i]) << '\n';
}

}  // namespace texflow
