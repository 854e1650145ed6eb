#include "usub/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace usub {

namespace {

constexpr double kJacobiConvergence = 1e-10;
constexpr int kMaxSweeps = 60;

}  // namespace

void matmul_into(Matrix& c, const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: a.cols != b.rows");
    c.resize(a.rows(), b.cols());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b.row(p);
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix c;
    matmul_into(c, a, b);
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw DimensionError("matmul_tn: a.rows != b.rows");
    Matrix c(a.cols(), b.cols());
    const std::size_t t = a.rows(), m = a.cols(), n = b.cols();
    for (std::size_t p = 0; p < t; ++p) {
        const double* ap = a.row(p);
        const double* bp = b.row(p);
        for (std::size_t i = 0; i < m; ++i) {
            const double api = ap[i];
            double* ci = c.row(i);
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("matmul_nt: a.cols != b.cols");
    Matrix c(a.rows(), b.rows());
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b.row(j);
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = s;
        }
    }
    return c;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * a.data()[i];
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

std::vector<double> project_out(std::span<const double> v,
                                const std::vector<std::vector<double>>& basis) {
    std::vector<double> out(v.begin(), v.end());
    if (basis.empty()) return out;
    // Coefficients against the original v, then one summed subtraction.
    std::vector<double> accum(v.size(), 0.0);
    for (const auto& u : basis) {
        if (u.size() != v.size()) throw DimensionError("project_out: length mismatch");
        const double uu = dot(u, u);
        if (uu < 1e-30) continue;  // degenerate basis vector, skip
        const double coef = dot(v, u) / uu;
        for (std::size_t i = 0; i < u.size(); ++i) accum[i] += coef * u[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= accum[i];
    return out;
}

std::vector<double> column(const Matrix& m, std::size_t j) {
    std::vector<double> v(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) v[i] = m(i, j);
    return v;
}

void set_column(Matrix& m, std::size_t j, std::span<const double> v) {
    if (v.size() != m.rows()) throw DimensionError("set_column: length mismatch");
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) = v[i];
}

namespace {

// One-sided Jacobi on a tall-or-square working copy: right rotations
// orthogonalize the columns of w while v accumulates them.
SvdFactors svd_tall(const Matrix& a, double tol) {
    const std::size_t m = a.rows(), n = a.cols();
    Matrix w = a;
    Matrix v = Matrix::identity(n);

    double off = 0.0;
    bool converged = (n <= 1);
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if (alpha * beta == 0.0) continue;
                const double scaled = std::abs(gamma) / std::sqrt(alpha * beta);
                off = std::max(off, scaled);
                if (scaled <= kJacobiConvergence) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        converged = off <= kJacobiConvergence;
    }
    if (!converged) {
        throw NumericalError("svd: Jacobi sweeps did not converge", off);
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
        sigma[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = sigma.empty() ? 0.0 : sigma[order[0]];
    std::size_t r = 0;
    while (r < n && sigma[order[r]] > tol * smax && sigma[order[r]] > 0.0) ++r;

    SvdFactors f;
    f.u = Matrix(m, r);
    f.v = Matrix(n, r);
    f.s.resize(r);
    for (std::size_t jj = 0; jj < r; ++jj) {
        const std::size_t src = order[jj];
        const double sj = sigma[src];
        f.s[jj] = sj;
        // Sign convention: largest-magnitude entry of the left vector >= 0.
        std::size_t imax = 0;
        double vmax = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = std::abs(w(i, src));
            if (av > vmax) {
                vmax = av;
                imax = i;
            }
        }
        const double flip = (w(imax, src) < 0.0) ? -1.0 : 1.0;
        for (std::size_t i = 0; i < m; ++i) f.u(i, jj) = flip * w(i, src) / sj;
        for (std::size_t i = 0; i < n; ++i) f.v(i, jj) = flip * v(i, src);
    }
    return f;
}

}  // namespace

SvdFactors svd(const Matrix& a, double tol) {
    if (tol <= 0.0) throw InvalidInput("svd: tol must be positive");
    if (!all_finite(a)) throw InvalidInput("svd: input has non-finite entries");
    if (a.rows() >= a.cols()) return svd_tall(a, tol);
    SvdFactors f = svd_tall(transpose(a), tol);
    std::swap(f.u, f.v);
    // Re-apply the sign convention to the swapped-in left vectors.
    for (std::size_t j = 0; j < f.rank(); ++j) {
        std::size_t imax = 0;
        double vmax = 0.0;
        for (std::size_t i = 0; i < f.u.rows(); ++i) {
            const double av = std::abs(f.u(i, j));
            if (av > vmax) {
                vmax = av;
                imax = i;
            }
        }
        if (f.u(imax, j) < 0.0) {
            for (std::size_t i = 0; i < f.u.rows(); ++i) f.u(i, j) = -f.u(i, j);
            for (std::size_t i = 0; i < f.v.rows(); ++i) f.v(i, j) = -f.v(i, j);
        }
    }
    return f;
}

Matrix reconstruct(const SvdFactors& f) {
    const std::size_t m = f.u.rows(), n = f.v.rows(), r = f.rank();
    if (f.u.cols() != r || f.v.cols() != r) {
        throw DimensionError("reconstruct: factor shapes inconsistent with rank");
    }
    Matrix out(m, n);
    for (std::size_t j = 0; j < r; ++j) {
        const double sj = f.s[j];
        for (std::size_t i = 0; i < m; ++i) {
            const double us = f.u(i, j) * sj;
            double* oi = out.row(i);
            for (std::size_t p = 0; p < n; ++p) oi[p] += us * f.v(p, j);
        }
    }
    return out;
}

}  // namespace usub
