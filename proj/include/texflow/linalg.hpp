// ============================================================================
// linalg.hpp - dense vector/matrix helpers for the desk-scale solvers
// ============================================================================

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "texflow/common.hpp"

namespace texflow {

using Vec = std::vector<double>;

// Row-major dense matrix.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

inline double dot(const Vec& x, const Vec& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm2(const Vec& x) { return std::sqrt(dot(x, x)); }

inline void axpy(double alpha, const Vec& x, Vec& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec matvec(const Mat& m, const Vec& x) {
    Vec y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        const double* row = &m.a[i * m.cols];
        for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * x[j];
        y[i] = s;
    }
    return y;
}

// y = M^T x
inline Vec matTvec(const Mat& m, const Vec& x) {
    Vec y(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = &m.a[i * m.cols];
        const double xi = x[i];
        for (std::size_t j = 0; j < m.cols; ++j) y[j] += row[j] * xi;
    }
    return y;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b.a[k * b.cols];
            double* crow = &c.a[i * c.cols];
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// Solves A x = b for symmetric positive-definite A via Cholesky. A is
// consumed (factored in place).
inline Vec cholesky_solve(Mat A, Vec b) {
    const std::size_t n = A.rows;
    if (A.cols != n || b.size() != n) throw ParameterError("cholesky_solve: shape mismatch");
    for (std::size_t j = 0; j < n; ++j) {
        double d = A(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= A(j, k) * A(j, k);
        if (!(d > 0.0) || !std::isfinite(d))
            throw NumericError("cholesky_solve: matrix not positive definite");
        const double ljj = std::sqrt(d);
        A(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = A(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= A(i, k) * A(j, k);
            A(i, j) = s / ljj;
        }
    }
    // Forward substitution L y = b
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= A(i, k) * b[k];
        b[i] = s / A(i, i);
    }
    // Back substitution L^T x = y
    for (std::size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= A(k, ii) * b[k];
        b[ii] = s / A(ii, ii);
    }
    return b;
}

// log|det A| via partial-pivot LU; used by the finite-difference Jacobian
// oracles. Throws NumericError on a singular matrix.
inline double lu_log_abs_det(Mat A) {
    const std::size_t n = A.rows;
    if (A.cols != n) throw ParameterError("lu_log_abs_det: matrix must be square");
    double log_det = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t pivot = k;
        double best = std::fabs(A(k, k));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double v = std::fabs(A(i, k));
            if (v > best) {
                best = v;
                pivot = i;
            }
        }
        if (best == 0.0) throw NumericError("lu_log_abs_det: singular matrix");
        if (pivot != k)
            for (std::size_t j = 0; j < n; ++j) std::swap(A(k, j), A(pivot, j));
        log_det += std::log(std::fabs(A(k, k)));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = A(i, k) / A(k, k);
            A(i, k) = f;
            for (std::size_t j = k + 1; j < n; ++j) A(i, j) -= f * A(k, j);
        }
    }
    return log_det;
}

// Largest eigenvalue of D^T D by power iteration on the Gram operator.
// Deterministic start vector; slight overestimate is applied by callers that
// need a safe Lipschitz bound.
inline double gram_spectral_norm(const Mat& d, int iters = 100) {
    const std::size_t m = d.cols;
    Vec v(m);
    for (std::size_t j = 0; j < m; ++j) v[j] = 1.0 + 1e-3 * double(j % 7);
    double nv = norm2(v);
    for (auto& x : v) x /= nv;
    double lambda = 0.0;
    for (int it = 0; it < iters; ++it) {
        Vec w = matTvec(d, matvec(d, v));
        lambda = dot(v, w);
        const double nw = norm2(w);
        if (nw == 0.0) return 0.0;
        for (std::size_t j = 0; j < m; ++j) v[j] = w[j] / nw;
    }
    if (!std::isfinite(lambda)) throw NumericError("gram_spectral_norm: diverged");
    return lambda;
}

}  // namespace texflow
