#pragma once

#include <span>
#include <vector>

#include "usub/matrix.hpp"

namespace usub {

// SVD factor triple a ~ u * diag(s) * v^T with the rank already truncated:
// u is m x r, v is n x r, s holds the r retained singular values in
// non-increasing order. r may be zero (zero matrix input).
struct SvdFactors {
    Matrix u;
    std::vector<double> s;
    Matrix v;

    std::size_t rank() const { return s.size(); }
};

// c = a * b. Throws DimensionError when a.cols != b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);

// c = a^T * b, both walked row-wise so nothing gets transposed in memory.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// c = a * b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// In-place variants for hot loops: _into overwrites c (resizing it),
// _acc accumulates into an already-shaped c.
void matmul_into(Matrix& c, const Matrix& a, const Matrix& b);
void matmul_nt_into(Matrix& c, const Matrix& a, const Matrix& b);
void matmul_tn_acc(Matrix& c, const Matrix& a, const Matrix& b);

// One-sided Jacobi SVD with cyclic sweeps. Singular values below
// tol * max(s) are truncated away. Column signs are fixed so the
// largest-magnitude entry of each left singular vector is non-negative.
// Throws NumericalError if the off-diagonal residual is still above the
// convergence threshold after the sweep cap.
SvdFactors svd(const Matrix& a, double tol = 1e-8);

// u * diag(s) * v^T. Rank 0 gives the zero matrix of the recorded shape.
Matrix reconstruct(const SvdFactors& f);

// sqrt of the sum of squared entries.
double frobenius_norm(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);

// Subtracts from v its projection onto each basis vector, all coefficients
// taken against the original v (classical Gram-Schmidt step). Basis vectors
// with squared norm below 1e-30 are skipped. Throws DimensionError on
// length mismatch.
std::vector<double> project_out(std::span<const double> v,
                                const std::vector<std::vector<double>>& basis);

std::vector<double> column(const Matrix& m, std::size_t j);
void set_column(Matrix& m, std::size_t j, std::span<const double> v);

}  // namespace usub
