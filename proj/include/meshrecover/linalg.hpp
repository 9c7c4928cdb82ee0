// Small dense linear algebra in double precision: just enough for the
// resolution-change operators (matrix application, Cholesky, pseudoinverse).
#pragma once

#include <cmath>
#include <string>

#include "tensor.hpp"

namespace meshrecover {
namespace linalg {

inline void check_2d(const Tensor<double>& a, const char* name) {
    if (a.rank() != 2)
        throw std::invalid_argument(std::string(name) + " must be rank-2, got rank " +
                                    std::to_string(a.rank()));
}

inline Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b) {
    check_2d(a, "a");
    check_2d(b, "b");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                    " * " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<double> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.data() + i * k;
        double* ci = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    return c;
}

inline Tensor<double> transpose(const Tensor<double>& a) {
    check_2d(a, "a");
    Tensor<double> t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// In-place Cholesky factorization A = L*L^T of a symmetric positive-definite
// matrix. Throws if a pivot is not positive.
inline Tensor<double> cholesky(const Tensor<double>& a) {
    check_2d(a, "a");
    if (a.rows() != a.cols()) throw std::invalid_argument("cholesky: matrix must be square");
    const std::size_t n = a.rows();
    Tensor<double> l({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a.at(i, j);
            for (std::size_t p = 0; p < j; ++p) s -= l.at(i, p) * l.at(j, p);
            if (i == j) {
                if (s <= 0.0)
                    throw std::invalid_argument("cholesky: matrix is not positive definite (pivot " +
                                                std::to_string(s) + " at row " + std::to_string(i) + ")");
                l.at(i, i) = std::sqrt(s);
            } else {
                l.at(i, j) = s / l.at(j, j);
            }
        }
    }
    return l;
}

// Solves A X = B for SPD A via Cholesky; B may have multiple columns.
inline Tensor<double> cholesky_solve(const Tensor<double>& a, const Tensor<double>& b) {
    check_2d(b, "b");
    const Tensor<double> l = cholesky(a);
    const std::size_t n = l.rows(), m = b.cols();
    if (b.rows() != n) throw std::invalid_argument("cholesky_solve: size mismatch");
    Tensor<double> x = b;
    // Forward substitution L y = B.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < m; ++c) {
            double s = x.at(i, c);
            for (std::size_t p = 0; p < i; ++p) s -= l.at(i, p) * x.at(p, c);
            x.at(i, c) = s / l.at(i, i);
        }
    }
    // Back substitution L^T x = y.
    for (std::size_t ii = n; ii-- > 0;) {
        for (std::size_t c = 0; c < m; ++c) {
            double s = x.at(ii, c);
            for (std::size_t p = ii + 1; p < n; ++p) s -= l.at(p, ii) * x.at(p, c);
            x.at(ii, c) = s / l.at(ii, ii);
        }
    }
    return x;
}

// Moore-Penrose pseudoinverse of a full-row-rank matrix D (r x c, r <= c):
// pinv(D) = D^T (D D^T)^{-1}, computed via Cholesky on the r x r Gram matrix.
inline Tensor<double> pinv_full_row_rank(const Tensor<double>& d) {
    check_2d(d, "d");
    if (d.rows() > d.cols())
        throw std::invalid_argument("pinv_full_row_rank: expected rows <= cols, got " +
                                    shape_str(d.shape()));
    const Tensor<double> dt = transpose(d);
    const Tensor<double> gram = matmul(d, dt);  // r x r, SPD when D has full row rank
    Tensor<double> eye({d.rows(), d.rows()});
    for (std::size_t i = 0; i < d.rows(); ++i) eye.at(i, i) = 1.0;
    const Tensor<double> gram_inv = cholesky_solve(gram, eye);
    return matmul(dt, gram_inv);
}

}  // namespace linalg
}  // namespace meshrecover
