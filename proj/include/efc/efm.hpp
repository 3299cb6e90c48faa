#pragma once

// Empirical Feature Matrix: the expected outer product of log-likelihood
// gradients taken with respect to the feature vector, over labels drawn
// from the model's own softmax. It is an n x n PSD pseudo-metric on feature
// space whose range holds the directions the classifier is sensitive to.

#include "efc/linalg.hpp"
#include "efc/model.hpp"

#include <cstddef>
#include <span>

namespace efc {

struct EmpiricalFeatureMatrix {
  Matrix matrix;
  std::size_t task_index = 0;
  Index num_classes = 0;
  std::size_t sample_count = 0;
};

struct Spectrum {
  Vector eigenvalues;   // descending
  Matrix eigenvectors;  // columns
  Index rank = 0;
};

/// Per-sample EFM for features f and head weights W (n x m):
///   Σ_y p_y · W(e_y − p) (W(e_y − p))ᵀ,  p = softmax(Wᵀf).
/// Needs only the forward logits; no backward pass.
Matrix local_efm(const Vector& features, const Matrix& head_weights);

/// Running mean of local_efm over the rows of `features`, in row order.
EmpiricalFeatureMatrix efm_from_features(const Matrix& features, const ClassifierHead& head,
                                         std::size_t task_index = 0);

/// EFM of a task dataset, using the complete head over all classes seen so far.
EmpiricalFeatureMatrix dataset_efm(const FeatureExtractor& extractor, const ClassifierHead& head,
                                   const Matrix& inputs, std::size_t task_index = 0);

/// δᵀ E δ.
double kl_quadratic(const Matrix& efm, const Vector& delta);

/// KL(p(y | f + δ) ‖ p(y | f)) for the head's softmax, evaluated in a form
/// that stays accurate when δ is tiny.
double softmax_kl(const Matrix& head_weights, const Vector& features, const Vector& delta);

Spectrum spectrum_analysis(const Matrix& efm, double rel_tol = 1e-8);

enum class PerturbationMode { principal, non_principal };

struct PerturbationReport {
  PerturbationMode mode = PerturbationMode::principal;
  double sigma = 0.0;
  Index rank = 0;
  double mean_abs_deviation = 0.0;  // mean |Δsoftmax| over samples and classes
  double max_abs_deviation = 0.0;
  double accuracy_clean = 0.0;
  double accuracy_perturbed = 0.0;
  double accuracy_delta() const { return accuracy_clean - accuracy_perturbed; }
};

/// 0.5 · sqrt(trace(E) / rank); zero for a rank-0 spectrum.
double default_perturbation_scale(const Spectrum& spectrum);

/// Perturbs each feature vector by U·ε with ε ~ N(0, σ²) on the first `rank`
/// eigen-coordinates (principal) or on the remaining n − rank (non-principal),
/// then measures how far the softmax output and the accuracy move.
PerturbationReport perturbation_report(const FeatureExtractor& extractor, const ClassifierHead& head,
                                       const Spectrum& spectrum, const Matrix& inputs,
                                       std::span<const int> labels, double sigma, PerturbationMode mode,
                                       Rng& rng);

}  // namespace efc
