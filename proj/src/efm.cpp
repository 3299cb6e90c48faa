#include "efc/efm.hpp"

#include <cmath>
#include <string>

namespace efc {
namespace {

// Gs = W (I_m − P)ᵀ diag(√p): column y is √p_y · W(e_y − p).
Matrix scaled_jacobian(const Vector& features, const Matrix& w) {
  const Vector p = softmax(w.transpose() * features);
  const Vector wp = w * p;
  Matrix gs = w;
  gs.colwise() -= wp;
  for (Index y = 0; y < gs.cols(); ++y) gs.col(y) *= std::sqrt(p[y]);
  return gs;
}

Matrix symmetric_outer(const Matrix& gs) {
  Matrix e = Matrix::Zero(gs.rows(), gs.rows());
  e.selfadjointView<Eigen::Lower>().rankUpdate(gs);
  e.triangularView<Eigen::StrictlyUpper>() = e.transpose();
  return e;
}

}  // namespace

Matrix local_efm(const Vector& features, const Matrix& head_weights) {
  if (features.size() != head_weights.rows()) {
    throw DimensionError("local_efm: features have " + std::to_string(features.size()) +
                         " entries, head expects " + std::to_string(head_weights.rows()));
  }
  return symmetric_outer(scaled_jacobian(features, head_weights));
}

EmpiricalFeatureMatrix efm_from_features(const Matrix& features, const ClassifierHead& head,
                                         std::size_t task_index) {
  if (features.rows() == 0) throw std::invalid_argument("dataset_efm: empty dataset");
  if (features.cols() != head.feature_dim()) throw DimensionError("dataset_efm: feature width mismatch");
  const Index n = head.feature_dim();
  EmpiricalFeatureMatrix out;
  out.matrix = Matrix::Zero(n, n);
  out.task_index = task_index;
  out.num_classes = head.num_classes();
  for (Index i = 0; i < features.rows(); ++i) {
    const Matrix local = local_efm(features.row(i).transpose(), head.weights);
    const double k = static_cast<double>(i + 1);
    out.matrix += (local - out.matrix) / k;
  }
  out.sample_count = static_cast<std::size_t>(features.rows());
  return out;
}

EmpiricalFeatureMatrix dataset_efm(const FeatureExtractor& extractor, const ClassifierHead& head,
                                   const Matrix& inputs, std::size_t task_index) {
  if (inputs.rows() == 0) throw std::invalid_argument("dataset_efm: empty dataset");
  return efm_from_features(extract_features(extractor, inputs), head, task_index);
}

double kl_quadratic(const Matrix& efm, const Vector& delta) { return quadratic_form(efm, delta); }

double softmax_kl(const Matrix& head_weights, const Vector& features, const Vector& delta) {
  if (features.size() != head_weights.rows() || delta.size() != features.size()) {
    throw DimensionError("softmax_kl: dimension mismatch");
  }
  const Vector p = softmax(head_weights.transpose() * features);
  Vector shift = head_weights.transpose() * delta;
  // KL is invariant to a constant logit shift; centring keeps both terms O(|Δz|²).
  shift.array() -= p.dot(shift);
  double s = 0.0;
  for (Index i = 0; i < p.size(); ++i) s += p[i] * std::expm1(shift[i]);
  const double log_norm = std::log1p(s);
  double expected = 0.0;
  for (Index i = 0; i < p.size(); ++i) expected += p[i] * std::exp(shift[i]) * shift[i];
  expected /= (1.0 + s);
  return expected - log_norm;
}

Spectrum spectrum_analysis(const Matrix& efm, double rel_tol) {
  const auto eig = sym_eig(efm);
  Spectrum out;
  out.eigenvalues = eig.eigenvalues;
  out.eigenvectors = eig.eigenvectors;
  out.rank = numerical_rank(out.eigenvalues, rel_tol);
  return out;
}

double default_perturbation_scale(const Spectrum& spectrum) {
  if (spectrum.rank == 0) return 0.0;
  return 0.5 * std::sqrt(spectrum.eigenvalues.sum() / static_cast<double>(spectrum.rank));
}

PerturbationReport perturbation_report(const FeatureExtractor& extractor, const ClassifierHead& head,
                                       const Spectrum& spectrum, const Matrix& inputs,
                                       std::span<const int> labels, double sigma, PerturbationMode mode,
                                       Rng& rng) {
  const Index n = head.feature_dim();
  if (spectrum.eigenvectors.rows() != n) throw DimensionError("perturbation_report: spectrum/head mismatch");
  if (static_cast<Index>(labels.size()) != inputs.rows()) {
    throw DimensionError("perturbation_report: label count mismatch");
  }
  if (mode == PerturbationMode::principal && spectrum.rank == 0) {
    throw std::invalid_argument("perturbation_report: no principal directions (rank 0)");
  }
  const Index first = mode == PerturbationMode::principal ? 0 : spectrum.rank;
  const Index count = mode == PerturbationMode::principal ? spectrum.rank : n - spectrum.rank;

  const Matrix features = extract_features(extractor, inputs);
  Matrix noise = Matrix::Zero(features.rows(), n);
  if (count > 0 && sigma > 0.0) {
    std::normal_distribution<double> normal(0.0, sigma);
    Matrix eps(features.rows(), count);
    for (Index r = 0; r < eps.rows(); ++r) {
      for (Index c = 0; c < count; ++c) eps(r, c) = normal(rng);
    }
    noise = eps * spectrum.eigenvectors.middleCols(first, count).transpose();
  }
  const Matrix clean_logits = compute_logits(head, features);
  const Matrix noisy_logits = compute_logits(head, features + noise);
  const Matrix dev = (softmax_rows(noisy_logits) - softmax_rows(clean_logits)).cwiseAbs();
  const auto clean_pred = predict(clean_logits);
  const auto noisy_pred = predict(noisy_logits);

  PerturbationReport out;
  out.mode = mode;
  out.sigma = sigma;
  out.rank = spectrum.rank;
  out.mean_abs_deviation = dev.size() > 0 ? dev.mean() : 0.0;
  out.max_abs_deviation = dev.size() > 0 ? dev.maxCoeff() : 0.0;
  std::size_t hits_clean = 0;
  std::size_t hits_noisy = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    hits_clean += clean_pred[i] == labels[i] ? 1u : 0u;
    hits_noisy += noisy_pred[i] == labels[i] ? 1u : 0u;
  }
  const double total = labels.empty() ? 1.0 : static_cast<double>(labels.size());
  out.accuracy_clean = static_cast<double>(hits_clean) / total;
  out.accuracy_perturbed = static_cast<double>(hits_noisy) / total;
  return out;
}

}  // namespace efc
