#include "doctest.h"
#include "test_util.hpp"

#include "efc/linalg.hpp"

#include <Eigen/Eigenvalues>
#include <cstring>
#include <sstream>

using namespace efc;
using namespace efc::testing;

TEST_SUITE("linalg") {

TEST_CASE("sym_eig agrees with a reference solver on random matrices") {
  Rng rng(11);
  std::uniform_int_distribution<Index> size(1, 64);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = trial < 3 ? Index(trial + 1) : size(rng);
    const Matrix s = random_symmetric(n, rng);
    const auto mine = sym_eig(s);
    Eigen::SelfAdjointEigenSolver<Matrix> ref(s);
    const Vector expected = ref.eigenvalues().reverse();
    CHECK((mine.eigenvalues - expected).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, expected.cwiseAbs().maxCoeff()));
    const Matrix& v = mine.eigenvectors;
    CHECK((v.transpose() * v - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-10);
    const Matrix back = v * mine.eigenvalues.asDiagonal() * v.transpose();
    CHECK(rel_error(back, s) < 1e-10);
    for (Index i = 1; i < n; ++i) CHECK(mine.eigenvalues[i - 1] >= mine.eigenvalues[i]);
  }
}

TEST_CASE("sym_eig handles diagonal, repeated and rank-deficient inputs") {
  Matrix d = Vector::LinSpaced(5, 1.0, 5.0).asDiagonal();
  auto r = sym_eig(d);
  CHECK(r.eigenvalues[0] == doctest::Approx(5.0));
  CHECK(r.eigenvalues[4] == doctest::Approx(1.0));

  Rng rng(3);
  const Matrix a = randn(10, 3, rng);
  const Matrix psd = a * a.transpose();
  r = sym_eig(psd);
  CHECK(numerical_rank(r.eigenvalues, 1e-10) == 3);
  for (Index i = 3; i < 10; ++i) CHECK(r.eigenvalues[i] >= 0.0);

  const Matrix iso = 2.0 * Matrix::Identity(4, 4);
  r = sym_eig(iso);
  CHECK((r.eigenvalues.array() - 2.0).abs().maxCoeff() < 1e-14);
}

TEST_CASE("sym_eig rejects bad input") {
  CHECK_THROWS_AS(sym_eig(Matrix(2, 3)), DimensionError);
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  CHECK_THROWS_AS(sym_eig(a), DimensionError);
  a << 1, std::nan(""), std::nan(""), 1;
  CHECK_THROWS_AS(sym_eig(a), NumericalError);
  CHECK(sym_eig(Matrix(0, 0)).eigenvalues.size() == 0);
}

TEST_CASE("numerical_rank uses a relative cutoff") {
  Vector ev(4);
  ev << 1.0, 1e-7, 1e-9, 0.0;
  CHECK(numerical_rank(ev, 1e-6) == 1);
  CHECK(numerical_rank(ev, 1e-8) == 2);
  CHECK(numerical_rank(ev, 1e-10) == 3);
  CHECK(numerical_rank(Vector::Zero(3), 1e-8) == 0);
  CHECK(numerical_rank(Vector(), 1e-8) == 0);
}

TEST_CASE("quadratic_form") {
  Matrix s(2, 2);
  s << 2, 1, 1, 3;
  Vector v(2);
  v << 1, -1;
  CHECK(quadratic_form(s, v) == doctest::Approx(3.0));
  CHECK_THROWS_AS(quadratic_form(s, Vector(3)), DimensionError);
}

TEST_CASE("ridged_cholesky factors singular PSD matrices") {
  Rng rng(5);
  const Matrix a = randn(6, 2, rng);
  const Matrix cov = a * a.transpose();
  const Matrix l = ridged_cholesky(cov);
  CHECK(rel_error(l * l.transpose(), cov) < 1e-6);
  CHECK(l.isLowerTriangular());
  CHECK(ridged_cholesky(Matrix::Zero(3, 3)).isZero());
  CHECK_THROWS_AS(ridged_cholesky(Matrix(2, 3)), DimensionError);
}

TEST_CASE("sample_gaussian matches the requested moments") {
  Rng rng(9);
  Vector mean(3);
  mean << 1.0, -2.0, 0.5;
  Matrix cov(3, 3);
  cov << 2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 0.5;
  const Matrix x = sample_gaussian(mean, cov, 20000, rng);
  const Vector m = x.colwise().mean();
  const Matrix c = (x.rowwise() - m.transpose()).transpose() * (x.rowwise() - m.transpose()) / double(x.rows());
  CHECK((m - mean).cwiseAbs().maxCoeff() < 0.05);
  CHECK((c - cov).cwiseAbs().maxCoeff() < 0.08);

  const Matrix exact = sample_gaussian(mean, Matrix::Zero(3, 3), 4, rng);
  for (Index i = 0; i < 4; ++i) CHECK(exact.row(i).transpose() == mean);
  CHECK_THROWS_AS(sample_gaussian(mean, Matrix::Identity(2, 2), 1, rng), DimensionError);
}

TEST_CASE("matrix dump layout and round trip") {
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6.5;
  std::stringstream ss;
  write_matrix(ss, m);
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 4 + 4 + 6 * 8);
  CHECK(bytes.substr(0, 4) == "EFMM");
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);
  CHECK(static_cast<unsigned char>(bytes[8]) == 3);
  double second = 0;
  std::memcpy(&second, bytes.data() + 12 + 8, 8);
  CHECK(second == 2.0);  // row-major
  std::stringstream in(bytes);
  CHECK(read_matrix(in) == m);

  std::stringstream bad("XXXX");
  CHECK_THROWS(read_matrix(bad));
  std::stringstream truncated(bytes.substr(0, 20));
  CHECK_THROWS(read_matrix(truncated));
}

}
