#pragma once

// Dense real linear algebra used throughout the engine: cyclic-Jacobi
// symmetric eigendecomposition, quadratic forms, Gaussian sampling and
// spectral rank counting. Everything here is templated on the scalar type
// and works with any Eigen dense expression.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace efc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

/// Thrown when operand shapes do not agree or a symmetric input is not symmetric.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a factorization or iteration fails to produce a usable result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Eigenpairs of a symmetric matrix. Eigenvalues are sorted descending and
/// column j of `eigenvectors` belongs to `eigenvalues[j]`.
template <typename Scalar>
struct SymEigResult {
  VectorX<Scalar> eigenvalues;
  MatrixX<Scalar> eigenvectors;
};

namespace detail {

template <typename Derived>
void require_square(const Eigen::MatrixBase<Derived>& s, const char* what) {
  if (s.rows() != s.cols()) {
    throw DimensionError(std::string(what) + ": matrix is " + std::to_string(s.rows()) + "x" +
                         std::to_string(s.cols()) + ", expected square");
  }
}

// Computed entrywise; ‖A‖² − ‖diag A‖² cancels catastrophically near convergence.
template <typename Scalar>
Scalar off_diagonal_norm(const MatrixX<Scalar>& a) {
  Scalar sum = 0;
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < j; ++i) sum += a(i, j) * a(i, j);
  return std::sqrt(Scalar(2) * sum);
}

}  // namespace detail

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius mass drops below 1e-12 of the
/// diagonal mass, or after 100 sweeps. Eigenvalues in (-1e-9, 0) are clamped
/// to zero so PSD inputs come back with a non-negative spectrum.
template <typename Derived>
SymEigResult<typename Derived::Scalar> sym_eig(const Eigen::MatrixBase<Derived>& s,
                                               typename Derived::Scalar symmetry_tol = 1e-9) {
  using Scalar = typename Derived::Scalar;
  detail::require_square(s, "sym_eig");
  const Index n = s.rows();
  if (n == 0) return {};
  MatrixX<Scalar> a = s;
  if (!a.allFinite()) throw NumericalError("sym_eig: non-finite entries");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > symmetry_tol) {
    throw DimensionError("sym_eig: input is not symmetric");
  }
  a = Scalar(0.5) * (a + a.transpose()).eval();
  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);

  constexpr int kMaxSweeps = 100;
  const Scalar rel_tol = Scalar(1e-12);
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    const Scalar diag = a.diagonal().norm();
    const Scalar off = detail::off_diagonal_norm(a);
    if (off <= rel_tol * diag || off == Scalar(0)) {
      converged = true;
      break;
    }
    for (Index p = 0; p < n - 1; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        // Symmetric Schur 2x2: choose the smaller rotation angle.
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(Scalar(1) + theta * theta));
        const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
        const Scalar sn = t * c;
        for (Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        a(p, q) = Scalar(0);
        a(q, p) = Scalar(0);
        for (Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) {
    const Scalar diag = a.diagonal().norm();
    const Scalar off = detail::off_diagonal_norm(a);
    if (off > rel_tol * diag) throw NumericalError("sym_eig: Jacobi iteration did not converge");
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return a(i, i) > a(j, j); });

  SymEigResult<Scalar> out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Index j = 0; j < n; ++j) {
    Scalar value = a(order[j], order[j]);
    if (value < Scalar(0) && value > Scalar(-1e-9)) value = Scalar(0);
    out.eigenvalues[j] = value;
    out.eigenvectors.col(j) = v.col(order[j]);
  }
  return out;
}

/// vᵀ s v.
template <typename DerivedS, typename DerivedV>
typename DerivedS::Scalar quadratic_form(const Eigen::MatrixBase<DerivedS>& s,
                                         const Eigen::MatrixBase<DerivedV>& v) {
  detail::require_square(s, "quadratic_form");
  if (v.size() != s.rows()) {
    throw DimensionError("quadratic_form: vector has " + std::to_string(v.size()) +
                         " entries, matrix is " + std::to_string(s.rows()) + "x" +
                         std::to_string(s.cols()));
  }
  return v.dot(s * v);
}

/// Number of eigenvalues strictly above rel_tol * max. A spectrum whose
/// maximum is zero (or empty) has rank zero.
template <typename Derived>
Index numerical_rank(const Eigen::DenseBase<Derived>& eigenvalues,
                     typename Derived::Scalar rel_tol = 1e-8) {
  using Scalar = typename Derived::Scalar;
  if (eigenvalues.size() == 0) return 0;
  const Scalar top = eigenvalues.maxCoeff();
  if (!(top > Scalar(0))) return 0;
  const Scalar cutoff = rel_tol * top;
  Index rank = 0;
  for (Index i = 0; i < eigenvalues.size(); ++i) {
    if (eigenvalues[i] > cutoff) ++rank;
  }
  return rank;
}

/// Lower Cholesky factor of `cov` plus an adaptive ridge eps·trace/dim·I,
/// eps starting at 1e-8 and growing tenfold until LLT succeeds.
template <typename Derived>
MatrixX<typename Derived::Scalar> ridged_cholesky(const Eigen::MatrixBase<Derived>& cov) {
  using Scalar = typename Derived::Scalar;
  detail::require_square(cov, "ridged_cholesky");
  const Index d = cov.rows();
  if (d == 0) return MatrixX<Scalar>(0, 0);
  const Scalar scale = cov.trace() / Scalar(std::max<Index>(d, 1));
  if (scale == Scalar(0) && cov.cwiseAbs().maxCoeff() == Scalar(0)) {
    return MatrixX<Scalar>::Zero(d, d);
  }
  if (!(scale > Scalar(0))) throw NumericalError("ridged_cholesky: covariance has non-positive trace");
  for (Scalar eps = Scalar(1e-8); eps <= Scalar(1); eps *= Scalar(10)) {
    MatrixX<Scalar> ridged = cov;
    ridged.diagonal().array() += eps * scale;
    Eigen::LLT<MatrixX<Scalar>> llt(ridged);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw NumericalError("ridged_cholesky: factorization failed even with ridge");
}

/// Draws `count` rows of mean + L·z, z ~ N(0, I), for a precomputed lower factor L.
template <typename DerivedM, typename DerivedL>
MatrixX<typename DerivedM::Scalar> sample_gaussian_factored(const Eigen::MatrixBase<DerivedM>& mean,
                                                            const Eigen::MatrixBase<DerivedL>& lower,
                                                            Index count, Rng& rng) {
  using Scalar = typename DerivedM::Scalar;
  if (lower.rows() != mean.size() || lower.cols() != mean.size()) {
    throw DimensionError("sample_gaussian: mean/covariance dimensions disagree");
  }
  const Index d = mean.size();
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixX<Scalar> z(count, d);
  for (Index i = 0; i < count; ++i) {
    for (Index j = 0; j < d; ++j) z(i, j) = static_cast<Scalar>(normal(rng));
  }
  MatrixX<Scalar> out = z * lower.transpose();
  out.rowwise() += mean.transpose();
  return out;
}

/// Draws `count` samples of N(mean, cov) as rows. A zero covariance yields the
/// mean exactly.
template <typename DerivedM, typename DerivedC>
MatrixX<typename DerivedM::Scalar> sample_gaussian(const Eigen::MatrixBase<DerivedM>& mean,
                                                   const Eigen::MatrixBase<DerivedC>& cov,
                                                   Index count, Rng& rng) {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
    throw DimensionError("sample_gaussian: mean/covariance dimensions disagree");
  }
  return sample_gaussian_factored(mean, ridged_cholesky(cov), count, rng);
}

/// Writes `m` in the binary dump layout: "EFMM", u32 rows, u32 cols, then
/// little-endian f64 entries in row-major order.
void write_matrix(std::ostream& os, const Matrix& m);
Matrix read_matrix(std::istream& is);
void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

}  // namespace efc
