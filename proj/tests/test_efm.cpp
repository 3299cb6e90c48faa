#include "doctest.h"
#include "test_util.hpp"

#include "efc/efm.hpp"

using namespace efc;
using namespace efc::testing;

namespace {

// Expectation over y ~ p(y|f) of g gᵀ, with g = ∇_f log p(y|f) taken by
// central differences of the log-softmax.
Matrix gradient_definition_efm(const Vector& f, const Matrix& w) {
  const Index n = f.size();
  const Vector p = softmax(w.transpose() * f);
  Matrix e = Matrix::Zero(n, n);
  for (Index y = 0; y < w.cols(); ++y) {
    Vector g(n);
    for (Index k = 0; k < n; ++k) {
      Vector up = f, down = f;
      const double h = 1e-5;
      up[k] += h;
      down[k] -= h;
      g[k] = (std::log(softmax(w.transpose() * up)[y]) - std::log(softmax(w.transpose() * down)[y])) / (2 * h);
    }
    e += p[y] * g * g.transpose();
  }
  return e;
}

// Same expectation with the analytic score W(e_y − p).
Matrix score_sum_efm(const Vector& f, const Matrix& w) {
  const Vector p = softmax(w.transpose() * f);
  Matrix e = Matrix::Zero(f.size(), f.size());
  for (Index y = 0; y < w.cols(); ++y) {
    Vector ey = -p;
    ey[y] += 1.0;
    const Vector g = w * ey;
    e += p[y] * g * g.transpose();
  }
  return e;
}

}  // namespace

TEST_SUITE("efm") {

TEST_CASE("closed form matches the score expectation") {
  Rng rng(31);
  std::uniform_int_distribution<Index> dim(1, 64), cls(2, 20);
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = dim(rng), m = cls(rng);
    const Matrix w = randn(n, m, rng, 0.5);
    const Vector f = randn_vec(n, rng);
    const Matrix closed = local_efm(f, w);
    const Vector p = softmax(w.transpose() * f);
    const Matrix textbook = w * (Matrix(p.asDiagonal()) - p * p.transpose()) * w.transpose();
    CHECK(rel_error(closed, score_sum_efm(f, w)) < 1e-10);
    CHECK(rel_error(closed, textbook) < 1e-10);
  }
}

TEST_CASE("closed form matches finite-difference scores") {
  Rng rng(32);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix w = randn(6, 4, rng);
    const Vector f = randn_vec(6, rng);
    CHECK(rel_error(local_efm(f, w), gradient_definition_efm(f, w)) < 1e-7);
  }
}

TEST_CASE("local EFM is symmetric PSD with rank at most m-1") {
  Rng rng(33);
  const Matrix w = randn(10, 4, rng);
  const Matrix e = local_efm(randn_vec(10, rng), w);
  CHECK((e - e.transpose()).cwiseAbs().maxCoeff() == 0.0);
  const Spectrum s = spectrum_analysis(e, 1e-10);
  CHECK(s.rank == 3);
  CHECK(s.eigenvalues.minCoeff() > -1e-12);
}

TEST_CASE("directions with a constant logit shift are in the null space") {
  Rng rng(34);
  const Index n = 8, m = 3;
  const Matrix w = randn(n, m, rng);
  const Vector f = randn_vec(n, rng);
  // v with Wᵀv = 1·c: least-squares solve for a constant target.
  const Vector v = w.transpose().completeOrthogonalDecomposition().solve(Vector::Constant(m, 2.0));
  CHECK((w.transpose() * v).array().isApprox(Vector::Constant(m, 2.0).array(), 1e-10));
  CHECK(kl_quadratic(local_efm(f, w), v) < 1e-12);
  CHECK(softmax_kl(w, f, v) < 1e-14);
}

TEST_CASE("dataset EFM is the running mean of local EFMs") {
  Rng rng(35);
  ClassifierHead head{randn(5, 3, rng), {{0, 3}}};
  const Matrix feats = randn(7, 5, rng);
  Matrix mean = Matrix::Zero(5, 5);
  for (Index i = 0; i < 7; ++i) mean += local_efm(feats.row(i).transpose(), head.weights);
  mean /= 7.0;
  const auto e = efm_from_features(feats, head, 2);
  CHECK(rel_error(e.matrix, mean) < 1e-13);
  CHECK(e.sample_count == 7);
  CHECK(e.num_classes == 3);
  CHECK(e.task_index == 2);
  CHECK_THROWS(efm_from_features(Matrix(0, 5), head));
  CHECK_THROWS_AS(efm_from_features(Matrix(2, 4), head), DimensionError);
}

TEST_CASE("dataset EFM rank equals classes seen minus one") {
  Rng rng(36);
  const FeatureExtractor fx = small_extractor(rng, 6, {16}, 12);
  ClassifierHead head{randn(12, 5, rng), {{0, 5}}};
  const auto e = dataset_efm(fx, head, randn(40, 6, rng));
  for (const double tol : {1e-6, 1e-8, 1e-10}) CHECK(spectrum_analysis(e.matrix, tol).rank == 4);
}

TEST_CASE("KL matches half the quadratic form to second order") {
  Rng rng(37);
  const Matrix w = randn(6, 4, rng);
  const Vector f = randn_vec(6, rng);
  const Vector dir = randn_vec(6, rng).normalized();
  const Matrix e = local_efm(f, w);
  for (const double r : {1e-2, 1e-3}) {
    const Vector d = r * dir;
    const double kl = softmax_kl(w, f, d);
    CHECK(std::abs(kl - 0.5 * kl_quadratic(e, d)) < 10 * r * r * r);
  }
  CHECK(softmax_kl(w, f, Vector::Zero(6)) == 0.0);
}

TEST_CASE("softmax_kl agrees with the direct formula") {
  Rng rng(38);
  const Matrix w = randn(4, 3, rng);
  const Vector f = randn_vec(4, rng);
  const Vector d = randn_vec(4, rng, 0.5);
  const Vector p = softmax(w.transpose() * f);
  const Vector q = softmax(w.transpose() * (f + d));
  const double direct = (q.array() * (q.array() / p.array()).log()).sum();
  CHECK(softmax_kl(w, f, d) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("perturbations: null-space noise leaves the softmax unchanged") {
  Rng rng(39);
  const FeatureExtractor fx = small_extractor(rng, 6, {16}, 10);
  ClassifierHead head{randn(10, 4, rng), {{0, 4}}};
  const Matrix x = randn(50, 6, rng);
  std::vector<int> labels = predict(compute_logits(head, extract_features(fx, x)));
  const Spectrum s = spectrum_analysis(dataset_efm(fx, head, x).matrix);
  REQUIRE(s.rank == 3);
  const double sigma = 5.0 * default_perturbation_scale(s);
  const auto non = perturbation_report(fx, head, s, x, labels, sigma, PerturbationMode::non_principal, rng);
  CHECK(non.max_abs_deviation <= 1e-10);
  CHECK(non.accuracy_perturbed == non.accuracy_clean);
  const auto pri = perturbation_report(fx, head, s, x, labels, sigma, PerturbationMode::principal, rng);
  CHECK(pri.max_abs_deviation > 1e-3);
  const auto zero = perturbation_report(fx, head, s, x, labels, 0.0, PerturbationMode::principal, rng);
  CHECK(zero.max_abs_deviation == 0.0);
}

TEST_CASE("default perturbation scale") {
  Spectrum s;
  s.eigenvalues = Vector::Zero(3);
  s.eigenvalues << 4.0, 0.0, 0.0;
  s.rank = 1;
  CHECK(default_perturbation_scale(s) == doctest::Approx(1.0));
  s.rank = 0;
  CHECK(default_perturbation_scale(s) == 0.0);
}

}
