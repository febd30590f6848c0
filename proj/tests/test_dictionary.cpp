#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "texflow/dictionary.hpp"

using namespace texflow;

namespace {

Dictionary random_unit_dictionary(int n, int m, Rng& rng) {
    Dictionary d;
    d.n = n;
    d.m = m;
    d.atoms = Mat(std::size_t(n), std::size_t(m));
    for (int j = 0; j < m; ++j) {
        Vec col(std::size_t(n), 0.0);
        for (auto& v : col) v = rng.normal();
        const double nn = norm2(col);
        for (int i = 0; i < n; ++i) d.atoms(i, j) = col[i] / nn;
    }
    return d;
}

// Independent least-squares residual for supports of size <= 2, via explicit
// projection formulas (no shared solver with the library).
double ls_residual_1(const Dictionary& d, const Vec& y, int a) {
    double dy = 0.0, dd = 0.0;
    for (int i = 0; i < d.n; ++i) {
        dy += d.atoms(i, a) * y[i];
        dd += d.atoms(i, a) * d.atoms(i, a);
    }
    const double c = dy / dd;
    double r2 = 0.0;
    for (int i = 0; i < d.n; ++i) {
        const double r = y[i] - c * d.atoms(i, a);
        r2 += r * r;
    }
    return std::sqrt(std::max(0.0, r2));
}

double ls_residual_2(const Dictionary& d, const Vec& y, int a, int b) {
    double g11 = 0.0, g12 = 0.0, g22 = 0.0, r1 = 0.0, r2 = 0.0;
    for (int i = 0; i < d.n; ++i) {
        g11 += d.atoms(i, a) * d.atoms(i, a);
        g12 += d.atoms(i, a) * d.atoms(i, b);
        g22 += d.atoms(i, b) * d.atoms(i, b);
        r1 += d.atoms(i, a) * y[i];
        r2 += d.atoms(i, b) * y[i];
    }
    const double det = g11 * g22 - g12 * g12;
    if (std::fabs(det) < 1e-14) return ls_residual_1(d, y, a);
    const double c1 = (g22 * r1 - g12 * r2) / det;
    const double c2 = (g11 * r2 - g12 * r1) / det;
    double rr = 0.0;
    for (int i = 0; i < d.n; ++i) {
        const double r = y[i] - c1 * d.atoms(i, a) - c2 * d.atoms(i, b);
        rr += r * r;
    }
    return std::sqrt(std::max(0.0, rr));
}

double exhaustive_best_residual(const Dictionary& d, const Vec& y, int k_max) {
    double best = norm2(y);  // empty support
    for (int a = 0; a < d.m; ++a) best = std::min(best, ls_residual_1(d, y, a));
    if (k_max >= 2)
        for (int a = 0; a < d.m; ++a)
            for (int b = a + 1; b < d.m; ++b) best = std::min(best, ls_residual_2(d, y, a, b));
    return best;
}

double omp_residual(const Dictionary& d, const Vec& y, double xi, int k_max) {
    const SparseCode code = omp(d, y, xi, k_max);
    Vec r = reconstruct(d, code);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = y[i] - r[i];
    return norm2(r);
}

// Exact recovery condition (max_{i not in S} ||D_S^+ d_i||_1 < 1): when it
// holds, greedy pursuit provably finds the planted support, so OMP and the
// exhaustive search must coincide. The property suite samples from this
// well-posed instance family.
bool erc_holds(const Dictionary& d, const std::vector<int>& support) {
    const int k = int(support.size());
    for (int i = 0; i < d.m; ++i) {
        bool in_support = false;
        for (int s : support) in_support |= (s == i);
        if (in_support) continue;
        if (k == 1) {
            double num = 0.0;
            for (int r = 0; r < d.n; ++r) num += d.atoms(r, support[0]) * d.atoms(r, i);
            if (std::fabs(num) >= 1.0) return false;
        } else {
            double g12 = 0.0, b1 = 0.0, b2 = 0.0;
            for (int r = 0; r < d.n; ++r) {
                g12 += d.atoms(r, support[0]) * d.atoms(r, support[1]);
                b1 += d.atoms(r, support[0]) * d.atoms(r, i);
                b2 += d.atoms(r, support[1]) * d.atoms(r, i);
            }
            const double det = 1.0 - g12 * g12;
            if (std::fabs(det) < 1e-12) return false;
            const double z1 = (b1 - g12 * b2) / det;
            const double z2 = (b2 - g12 * b1) / det;
            if (std::fabs(z1) + std::fabs(z2) >= 1.0) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("OMP identity-dictionary case") {
    Dictionary d;
    d.n = d.m = 4;
    d.atoms = Mat(4, 4, 0.0);
    for (int i = 0; i < 4; ++i) d.atoms(i, i) = 1.0;

    const SparseCode code = omp(d, {0.0, 0.0, 3.0, 0.0}, 1e-9, 4);
    REQUIRE(code.support == std::vector<int>{2});
    CHECK(code.coefficients[0] == Catch::Approx(3.0).margin(1e-12));
    CHECK(omp_residual(d, {0.0, 0.0, 3.0, 0.0}, 1e-9, 4) <= 1e-9);
}

TEST_CASE("OMP on the zero signal returns the empty code") {
    Rng rng(1);
    const Dictionary d = random_unit_dictionary(5, 8, rng);
    const SparseCode code = omp(d, Vec(5, 0.0), 1e-9, 3);
    CHECK(code.support.empty());
    CHECK(code.nnz() == 0);
    CHECK(norm2(reconstruct(d, code)) == 0.0);
}

TEST_CASE("OMP rejects NaN input and wrong dims") {
    Rng rng(2);
    const Dictionary d = random_unit_dictionary(5, 8, rng);
    Vec y(5, 0.5);
    y[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(omp(d, y, 1e-9, 3), ParameterError);
    CHECK_THROWS_AS(omp(d, Vec(4, 1.0), 1e-9, 3), ParameterError);
}

TEST_CASE("OMP planted two-atom recovery matches exhaustive search") {
    Rng rng(34);
    const Dictionary d = random_unit_dictionary(5, 8, rng);
    Vec y(5, 0.0);
    for (int i = 0; i < 5; ++i) y[i] = 1.4 * d.atoms(i, 2) - 0.9 * d.atoms(i, 6);
    const SparseCode code = omp(d, y, 1e-9, 2);
    REQUIRE(code.support == std::vector<int>{2, 6});
    // exhaustive search agrees that this support reaches (near) zero residual
    double best = std::numeric_limits<double>::infinity();
    int best_a = -1, best_b = -1;
    for (int a = 0; a < 8; ++a)
        for (int b = a + 1; b < 8; ++b) {
            const double r = ls_residual_2(d, y, a, b);
            if (r < best) {
                best = r;
                best_a = a;
                best_b = b;
            }
        }
    CHECK(best_a == 2);
    CHECK(best_b == 6);
    CHECK(omp_residual(d, y, 1e-9, 2) <= 1e-9);
}

TEST_CASE("OMP vs exhaustive support search on 500 seeded instances") {
    Rng rng(500);
    int within_tol = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 4 + int(rng.uniform_int(0, 2));      // 4..6
        const int m = 6 + int(rng.uniform_int(0, 2));      // 6..8
        const int k_max = 1 + int(rng.uniform_int(0, 1));  // 1..2

        Dictionary d;
        std::vector<int> support;
        for (;;) {
            d = random_unit_dictionary(n, m, rng);
            support.clear();
            support.push_back(int(rng.uniform_int(0, m - 1)));
            if (k_max == 2) {
                int b = int(rng.uniform_int(0, m - 1));
                while (b == support[0]) b = int(rng.uniform_int(0, m - 1));
                support.push_back(b);
            }
            if (erc_holds(d, support)) break;
        }
        Vec y(std::size_t(n), 0.0);
        for (int s : support) {
            const double c = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.7, 1.5);
            for (int i = 0; i < n; ++i) y[i] += c * d.atoms(i, s);
        }

        const double r_omp = omp_residual(d, y, 0.0, k_max);
        const double r_best = exhaustive_best_residual(d, y, k_max);
        REQUIRE(r_omp >= r_best - 1e-9);  // exhaustive really is a lower bound
        REQUIRE(r_omp <= 1.5 * r_best + 1e-9);
        if (r_omp - r_best <= 1e-9) ++within_tol;
    }
    CHECK(within_tol >= 450);
}

TEST_CASE("OMP residual is non-increasing per step") {
    Rng rng(91);
    for (int trial = 0; trial < 50; ++trial) {
        const Dictionary d = random_unit_dictionary(6, 12, rng);
        Vec y(6);
        for (auto& v : y) v = rng.normal();
        double prev = norm2(y);
        for (int k = 1; k <= 5; ++k) {
            const double r = omp_residual(d, y, 0.0, k);
            REQUIRE(r <= prev + 1e-12);
            prev = r;
        }
    }
}

TEST_CASE("single scaled atom is found in one step") {
    Rng rng(7);
    const Dictionary d = random_unit_dictionary(6, 10, rng);
    Vec y(6);
    for (int i = 0; i < 6; ++i) y[i] = -2.7 * d.atoms(i, 4);
    const SparseCode code = omp(d, y, 1e-10, 1);
    REQUIRE(code.support == std::vector<int>{4});
    CHECK(code.coefficients[0] == Catch::Approx(-2.7).margin(1e-9));
}

TEST_CASE("ISTA shrinkage closed forms") {
    Dictionary ident;
    ident.n = ident.m = 2;
    ident.atoms = Mat(2, 2, 0.0);
    ident.atoms(0, 0) = ident.atoms(1, 1) = 1.0;

    SECTION("beta >= max|D^T y| kills everything") {
        const SparseCode code = lasso_solve(ident, {0.5, -0.3}, 0.6, 200);
        CHECK(code.support.empty());
    }
    SECTION("identity dictionary soft-thresholds y") {
        const SparseCode code = lasso_solve(ident, {2.0, 0.0}, 1.0, 400);
        REQUIRE(code.support == std::vector<int>{0});
        CHECK(code.coefficients[0] == Catch::Approx(1.0).margin(1e-8));
    }
}

TEST_CASE("ISTA objective is non-increasing every iteration") {
    Rng rng(12);
    for (int trial = 0; trial < 25; ++trial) {
        const Dictionary d = random_unit_dictionary(6, 12, rng);
        Vec y(6);
        for (auto& v : y) v = rng.normal();
        std::vector<double> history;
        lasso_solve(d, y, 0.1, 120, nullptr, &history);
        REQUIRE(history.size() == 120);
        for (std::size_t i = 1; i < history.size(); ++i)
            REQUIRE(history[i] <= history[i - 1] + 1e-12);
    }
}

TEST_CASE("ISTA approaches the long-run reference objective") {
    Rng rng(13);
    const Dictionary d = random_unit_dictionary(6, 10, rng);
    Vec y(6);
    for (auto& v : y) v = rng.normal();
    const double beta = 0.1;

    const SparseCode reference = lasso_solve(d, y, beta, 100000);
    const SparseCode solved = lasso_solve(d, y, beta, 3000);
    const double ref_obj = lasso_objective(d, y, reference.to_dense(), beta);
    const double obj = lasso_objective(d, y, solved.to_dense(), beta);
    CHECK(obj <= ref_obj + 1e-6);
}

TEST_CASE("MOD fixed point keeps exact reconstructions exact") {
    Rng rng(14);
    const Dictionary d = random_unit_dictionary(4, 6, rng);
    const std::size_t K = 12;
    std::vector<Vec> codes(K, Vec(6, 0.0));
    std::vector<Vec> signals(K);
    for (std::size_t s = 0; s < K; ++s) {
        codes[s][rng.uniform_int(0, 5)] = rng.uniform(0.5, 1.5);
        codes[s][rng.uniform_int(0, 5)] = rng.uniform(-1.5, -0.5);
        signals[s] = matvec(d.atoms, codes[s]);
    }
    Rng reseed(1);
    const ModUpdateResult upd = dict_update(d, signals, codes, reseed);
    upd.dictionary.check_unit_norm(1e-9);
    for (std::size_t s = 0; s < K; ++s) {
        Vec rescaled = codes[s];
        for (int j = 0; j < 6; ++j) rescaled[j] *= upd.column_scales[j];
        Vec recon = matvec(upd.dictionary.atoms, rescaled);
        for (int i = 0; i < 4; ++i)
            REQUIRE(std::fabs(recon[i] - signals[s][i]) < 1e-5);
    }
}

TEST_CASE("all-zero codes re-seed every atom from data") {
    Rng rng(15);
    const Dictionary d = random_unit_dictionary(4, 6, rng);
    std::vector<Vec> signals;
    for (int s = 0; s < 5; ++s) {
        Vec y(4);
        for (auto& v : y) v = rng.normal();
        signals.push_back(y);
    }
    const std::vector<Vec> codes(signals.size(), Vec(6, 0.0));
    Rng reseed(2);
    const ModUpdateResult upd = dict_update(d, signals, codes, reseed);
    upd.dictionary.check_unit_norm(1e-12);
    // every atom equals some normalized training signal
    for (int j = 0; j < 6; ++j) {
        bool matches = false;
        for (const auto& y : signals) {
            const double nn = norm2(y);
            double dev = 0.0;
            for (int i = 0; i < 4; ++i)
                dev = std::max(dev, std::fabs(upd.dictionary.atoms(i, j) - y[i] / nn));
            matches |= dev < 1e-12;
        }
        REQUIRE(matches);
    }
}

TEST_CASE("MOD update does not raise the refit objective") {
    Rng rng(16);
    const int n = 8, m = 16;
    const Dictionary d0 = random_unit_dictionary(n, m, rng);
    std::vector<Vec> signals;
    for (int s = 0; s < 50; ++s) {
        Vec y(n);
        for (auto& v : y) v = rng.normal();
        signals.push_back(y);
    }
    const double beta = 0.1;
    std::vector<Vec> codes;
    for (const auto& y : signals) codes.push_back(lasso_solve(d0, y, beta, 200).to_dense());
    const double before = dict_objective(d0, signals, codes, beta);

    Rng reseed(3);
    const ModUpdateResult upd = dict_update(d0, signals, codes, reseed);
    std::vector<Vec> refit;
    for (std::size_t s = 0; s < signals.size(); ++s) {
        Vec warm = codes[s];
        for (int j = 0; j < m; ++j) warm[j] *= upd.column_scales[j];
        refit.push_back(lasso_solve(upd.dictionary, signals[s], beta, 200, &warm).to_dense());
    }
    const double after = dict_objective(upd.dictionary, signals, refit, beta);
    CHECK(after <= before + 1e-9);
}

TEST_CASE("learn on an orthonormal basis reaches coefficient-cost-only objective") {
    const int n = 8;
    std::vector<Vec> signals;
    for (int j = 0; j < n; ++j) {
        Vec e(n, 0.0);
        e[j] = 1.0;
        signals.push_back(e);
    }
    DictLearnConfig cfg;
    cfg.atom_count = n;
    cfg.iters = 1;
    cfg.beta = 0.1;
    cfg.ista_iters = 400;
    cfg.seed = 5;
    const DictLearnResult res = learn(signals, cfg);
    REQUIRE(res.objective_history.size() == 1);
    CHECK(res.objective_history.back() <= cfg.beta * double(signals.size()));
    res.dictionary.check_unit_norm(1e-12);
}

TEST_CASE("learn is bit-deterministic for a fixed seed") {
    Rng rng(17);
    std::vector<Vec> signals;
    for (int s = 0; s < 40; ++s) {
        Vec y(6);
        for (auto& v : y) v = rng.normal();
        signals.push_back(y);
    }
    DictLearnConfig cfg;
    cfg.atom_count = 12;
    cfg.iters = 5;
    cfg.seed = 99;
    const DictLearnResult a = learn(signals, cfg);
    const DictLearnResult b = learn(signals, cfg);
    CHECK(a.dictionary.atoms.a == b.dictionary.atoms.a);
    CHECK(a.objective_history == b.objective_history);
}

TEST_CASE("learn objective history is non-increasing") {
    Rng rng(18);
    std::vector<Vec> signals;
    for (int s = 0; s < 60; ++s) {
        Vec y(8);
        for (auto& v : y) v = rng.normal();
        signals.push_back(y);
    }
    DictLearnConfig cfg;
    cfg.atom_count = 16;
    cfg.iters = 15;
    cfg.seed = 7;
    const DictLearnResult res = learn(signals, cfg);
    REQUIRE(res.objective_history.size() == 15);
    for (std::size_t i = 1; i < res.objective_history.size(); ++i)
        REQUIRE(res.objective_history[i] <= res.objective_history[i - 1] + 1e-9);
    res.dictionary.check_unit_norm(1e-12);
}

TEST_CASE("planted dictionary recovery bounds held-out reconstruction error") {
    const int n = 8, m = 16, K = 200;
    const double sigma = 0.01;
    Rng rng(19);
    const Dictionary planted = random_unit_dictionary(n, m, rng);

    auto draw_signal = [&](Rng& r) {
        Vec y(n, 0.0);
        const int a = int(r.uniform_int(0, m - 1));
        int b = int(r.uniform_int(0, m - 1));
        while (b == a) b = int(r.uniform_int(0, m - 1));
        const double ca = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.5, 1.5);
        const double cb = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.5, 1.5);
        for (int i = 0; i < n; ++i)
            y[i] = ca * planted.atoms(i, a) + cb * planted.atoms(i, b) + sigma * r.normal();
        return y;
    };

    std::vector<Vec> train;
    for (int s = 0; s < K; ++s) train.push_back(draw_signal(rng));

    DictLearnConfig cfg;
    cfg.atom_count = m;
    cfg.beta = 0.15;
    cfg.iters = 100;
    cfg.ista_iters = 300;
    cfg.seed = 3;
    const DictLearnResult res = learn(train, cfg);

    Rng held_rng(20);
    double mean_err = 0.0;
    const int held = 50;
    for (int s = 0; s < held; ++s) {
        const Vec y = draw_signal(held_rng);
        const SparseCode code = omp(res.dictionary, y, 0.0, 3);
        Vec r = reconstruct(res.dictionary, code);
        for (int i = 0; i < n; ++i) r[i] = y[i] - r[i];
        mean_err += norm2(r);
    }
    mean_err /= double(held);
    CHECK(mean_err < 3.0 * sigma * std::sqrt(double(n)));
}

TEST_CASE("learn rejects empty input and flags undersized corpora") {
    CHECK_THROWS_AS(learn(std::vector<Vec>{}, DictLearnConfig{}), ParameterError);
    std::vector<Vec> tiny(3, Vec(4, 1.0));
    DictLearnConfig cfg;
    cfg.atom_count = 8;
    cfg.iters = 1;
    cfg.seed = 1;
    const DictLearnResult res = learn(tiny, cfg);
    CHECK(res.size_warning);
}

TEST_CASE("reconstruct trivial cases") {
    Dictionary ident;
    ident.n = ident.m = 5;
    ident.atoms = Mat(5, 5, 0.0);
    for (int i = 0; i < 5; ++i) ident.atoms(i, i) = 1.0;

    SparseCode empty;
    empty.dim = 5;
    CHECK(norm2(reconstruct(ident, empty)) == 0.0);

    SparseCode one;
    one.dim = 5;
    one.support = {2};
    one.coefficients = {5.0};
    const Vec y = reconstruct(ident, one);
    CHECK(y == Vec{0.0, 0.0, 5.0, 0.0, 0.0});

    SparseCode wrong;
    wrong.dim = 4;
    CHECK_THROWS_AS(reconstruct(ident, wrong), ParameterError);
}

TEST_CASE("OMP + reconstruct honor the stopping tolerance") {
    Rng rng(21);
    const Dictionary d = random_unit_dictionary(6, 12, rng);
    Vec y(6, 0.0);
    for (int i = 0; i < 6; ++i)
        y[i] = 0.8 * d.atoms(i, 1) + 0.6 * d.atoms(i, 7) - 1.1 * d.atoms(i, 10);
    const double xi = 1e-8;
    CHECK(omp_residual(d, y, xi, 6) <= xi);
}

TEST_CASE("TXDL checkpoint round trip") {
    namespace fs = std::filesystem;
    Rng rng(22);
    const Dictionary d = random_unit_dictionary(6, 9, rng);
    const auto path = (fs::temp_directory_path() / "texflow_test.txdl").string();
    save_dictionary(d, path);
    const Dictionary back = load_dictionary(path);
    CHECK(back.n == d.n);
    CHECK(back.m == d.m);
    CHECK(back.atoms.a == d.atoms.a);

    // corrupt the magic
    {
        std::ofstream out(path, std::ios::binary);
        out.write("XXDL", 4);
    }
    CHECK_THROWS_AS(load_dictionary(path), FormatError);
    fs::remove(path);
}
