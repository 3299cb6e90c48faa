#include "doctest.h"
#include "test_util.hpp"

#include "efc/prototypes.hpp"

using namespace efc;
using namespace efc::testing;

TEST_SUITE("prototypes") {

TEST_CASE("class statistics by hand") {
  Matrix f(4, 2);
  f << 0, 0, 2, 0, 0, 2, 2, 2;
  const std::vector<int> labels{7, 7, 7, 7};
  const std::vector<int> ids{7};
  const auto stats = compute_class_stats(f, labels, ids, 3);
  REQUIRE(stats.size() == 1);
  CHECK(stats[0].mean == Vector::Ones(2));
  CHECK((stats[0].covariance - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(stats[0].origin_task == 3);

  Matrix shuffled(4, 2);
  shuffled << 2, 2, 0, 2, 2, 0, 0, 0;
  const auto again = compute_class_stats(shuffled, labels, ids, 3);
  CHECK((again[0].covariance - stats[0].covariance).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(again[0].mean == stats[0].mean);

  const auto diag = compute_class_stats(f, labels, ids, 0, true);
  CHECK(diag[0].diagonal);
  CHECK(diag[0].covariance.cols() == 1);
  CHECK(diag[0].full_covariance() == Matrix::Identity(2, 2));
}

TEST_CASE("class statistics edge cases") {
  Matrix f(3, 2);
  f << 1, 1, 1, 1, 5, 5;
  const std::vector<int> labels{0, 0, 1};
  const auto two = compute_class_stats(f, labels, std::vector<int>{0}, 0);
  CHECK(two[0].covariance.isZero());
  CHECK_THROWS(compute_class_stats(f, labels, std::vector<int>{1}, 0));
  CHECK_THROWS(compute_class_stats(f, labels, std::vector<int>{4}, 0));
}

TEST_CASE("store bookkeeping") {
  PrototypeStore store;
  store.add(make_prototype(2, Vector::Zero(3), Matrix::Identity(3, 3), 0));
  store.add(make_prototype(0, Vector::Ones(3), Matrix::Identity(3, 3), 0));
  CHECK(store.class_ids() == std::vector<int>{0, 2});
  CHECK_THROWS(store.add(make_prototype(2, Vector::Zero(3), Matrix::Identity(3, 3), 1)));
  CHECK_THROWS(store.at(5));
  store.shift_mean(2, Vector::Constant(3, 0.5));
  CHECK(store.at(2).mean == Vector::Constant(3, 0.5));
  CHECK(store.at(2).covariance == Matrix::Identity(3, 3));
}

TEST_CASE("pseudo-feature sampling") {
  PrototypeStore store;
  Vector mu(2);
  mu << 1.0, -1.0;
  store.add(make_prototype(0, mu, Matrix::Zero(2, 2), 0));
  store.add(make_prototype(1, -mu, 0.25 * Matrix::Identity(2, 2), 0));
  Rng rng(51);
  const auto zero = sample_pseudo_features(store, std::vector<int>{0}, 5, rng);
  for (Index i = 0; i < 5; ++i) CHECK(zero.features.row(i).transpose() == mu);
  CHECK(zero.labels == std::vector<int>(5, 0));

  const auto big = sample_pseudo_features(store, std::vector<int>{1}, 100000, rng);
  CHECK((Vector(big.features.colwise().mean().transpose()) + mu).cwiseAbs().maxCoeff() < 0.02);

  Rng a(3), b(3);
  const std::vector<std::pair<int, Index>> quotas{{0, 2}, {1, 3}};
  const auto s1 = sample_pseudo_features(store, quotas, a);
  const auto s2 = sample_pseudo_features(store, quotas, b);
  CHECK(s1.features == s2.features);
  CHECK(s1.labels == std::vector<int>{0, 0, 1, 1, 1});
  CHECK_THROWS(sample_pseudo_features(store, std::vector<int>{9}, 1, rng));
}

TEST_CASE("drift compensation contracts") {
  Rng rng(52);
  const Index n = 4;
  PrototypeStore store;
  for (int c = 0; c < 3; ++c) store.add(make_prototype(c, randn_vec(n, rng), Matrix::Identity(n, n), 0));
  const Matrix a = randn(n, 2, rng);
  const Matrix e = a * a.transpose();
  const Matrix old_f = randn(30, n, rng);
  DriftCompensationConfig cfg;

  SUBCASE("no drift leaves prototypes unchanged") {
    const auto out = compensate_drift(store, e, old_f, old_f, cfg);
    for (int c = 0; c < 3; ++c) CHECK(out.at(c).mean == store.at(c).mean);
  }
  SUBCASE("uniform translation moves every prototype by the same vector") {
    const Vector shift = randn_vec(n, rng);
    const Matrix new_f = old_f.rowwise() + shift.transpose();
    const auto out = compensate_drift(store, e, old_f, new_f, cfg);
    for (int c = 0; c < 3; ++c) CHECK((out.at(c).mean - store.at(c).mean - shift).cwiseAbs().maxCoeff() < 1e-12);
    for (int c = 0; c < 3; ++c) CHECK(out.at(c).covariance == store.at(c).covariance);
  }
  SUBCASE("a single sample sets the shift regardless of its weight") {
    const Matrix o = 100.0 * randn(1, n, rng);
    const Matrix d = randn(1, n, rng);
    const auto out = compensate_drift(store, e, o, o + d, cfg);
    for (int c = 0; c < 3; ++c) CHECK((out.at(c).mean - store.at(c).mean - d.row(0).transpose()).norm() < 1e-12);
  }
  SUBCASE("the shift is a convex combination of sample drifts") {
    const Matrix new_f = old_f + randn(30, n, rng);
    const double max_drift = (new_f - old_f).rowwise().norm().maxCoeff();
    const auto out = compensate_drift(store, e, old_f, new_f, cfg);
    for (int c = 0; c < 3; ++c) CHECK((out.at(c).mean - store.at(c).mean).norm() <= max_drift + 1e-12);
  }
  SUBCASE("input store is not mutated") {
    const Vector before = store.at(0).mean;
    (void)compensate_drift(store, e, old_f, old_f.array() + 1.0, cfg);
    CHECK(store.at(0).mean == before);
  }
}

TEST_CASE("drift weights") {
  Vector p = Vector::Zero(2);
  Matrix f(2, 2);
  f << 0, 0, 1, 0;
  const Matrix e = Matrix::Identity(2, 2);
  const Vector w = drift_weights(p, f, e, 0.5);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == doctest::Approx(std::exp(-1.0)));
  // Far samples underflow exp() but the normalized estimate stays finite.
  Matrix far = 1e4 * Matrix::Ones(2, 2);
  far(1, 0) += 1.0;
  Matrix drift(2, 2);
  drift << 1, 0, 0, 1;
  const Vector shift = estimate_prototype_drift(p, far, far + drift, e, 0.09);
  CHECK(shift.allFinite());
  CHECK(shift.sum() == doctest::Approx(1.0));
}

TEST_CASE("rotation drift: compensation moves prototypes toward the true means") {
  // Toy old/new backbones: f_old(x) = x, f_new(x) = R x with a small rotation.
  Rng rng(53);
  const double angle = 0.3;
  Matrix r(2, 2);
  r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  PrototypeStore store;
  std::vector<Vector> centers;
  for (int c = 0; c < 3; ++c) {
    Vector mu = randn_vec(2, rng, 2.0);
    centers.push_back(mu);
    store.add(make_prototype(c, mu, 0.1 * Matrix::Identity(2, 2), 0));
  }
  // Current-task samples spread around the old classes.
  Matrix old_f(300, 2);
  for (Index i = 0; i < 300; ++i) old_f.row(i) = (centers[std::size_t(i % 3)] + randn_vec(2, rng, 0.7)).transpose();
  const Matrix new_f = old_f * r.transpose();
  DriftCompensationConfig cfg;
  cfg.bandwidth_sq = 0.5;
  const auto out = compensate_drift(store, Matrix::Identity(2, 2), old_f, new_f, cfg);
  for (int c = 0; c < 3; ++c) {
    const Vector truth = r * centers[std::size_t(c)];
    CHECK((out.at(c).mean - truth).norm() < (store.at(c).mean - truth).norm());
  }
}

}
