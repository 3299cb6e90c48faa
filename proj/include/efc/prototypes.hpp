#pragma once

// Gaussian class prototypes: per-class feature statistics, pseudo-feature
// sampling for rehearsal, and EFM-weighted drift compensation of the means.

#include "efc/linalg.hpp"
#include "efc/model.hpp"

#include <cstddef>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace efc {

struct ClassPrototype {
  int class_id = -1;
  Vector mean;
  Matrix covariance;  // n x n, or n x 1 variances when `diagonal`
  std::size_t origin_task = 0;
  bool diagonal = false;
  Matrix sampling_factor;  // lower Cholesky factor (or √variances), fixed at creation

  Index dim() const { return mean.size(); }
  Matrix full_covariance() const;
};

/// Builds a prototype and its sampling factor.
ClassPrototype make_prototype(int class_id, Vector mean, Matrix covariance, std::size_t origin_task,
                              bool diagonal = false);

/// Class id -> prototype. Covariances are fixed once added; only means move.
class PrototypeStore {
 public:
  void add(ClassPrototype prototype);
  bool contains(int class_id) const { return entries_.count(class_id) != 0; }
  const ClassPrototype& at(int class_id) const;
  std::vector<int> class_ids() const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void shift_mean(int class_id, const Vector& delta);
  const std::map<int, ClassPrototype>& entries() const { return entries_; }

 private:
  std::map<int, ClassPrototype> entries_;
};

struct DriftCompensationConfig {
  double bandwidth_sq = 0.09;
  bool enabled = true;
  void validate() const;
};

/// Mean and population covariance of the features of each listed class.
std::vector<ClassPrototype> compute_class_stats(const Matrix& features, std::span<const int> labels,
                                                std::span<const int> class_ids, std::size_t origin_task,
                                                bool diagonal_only = false);
std::vector<ClassPrototype> compute_class_stats(const FeatureExtractor& extractor, const Matrix& inputs,
                                                std::span<const int> labels, std::span<const int> class_ids,
                                                std::size_t origin_task, bool diagonal_only = false);

struct LabeledFeatures {
  Matrix features;
  std::vector<int> labels;
};

/// `count_per_class` pseudo-features per listed class, grouped by class.
LabeledFeatures sample_pseudo_features(const PrototypeStore& store, std::span<const int> class_ids,
                                       Index count_per_class, Rng& rng);
/// Pseudo-features with a per-class count.
LabeledFeatures sample_pseudo_features(const PrototypeStore& store,
                                       std::span<const std::pair<int, Index>> quotas, Rng& rng);

/// w_i = exp(−(f_old,i − p) E (f_old,i − p)ᵀ / (2σ²)).
Vector drift_weights(const Vector& prototype, const Matrix& old_features, const Matrix& efm, double bandwidth_sq);

/// Σ w_i δ_i / Σ w_i, with the weights normalized in log space so the ratio
/// is finite even when every raw weight underflows.
Vector estimate_prototype_drift(const Vector& prototype, const Matrix& old_features, const Matrix& new_features,
                                const Matrix& efm, double bandwidth_sq);

/// Shifts every stored mean by its estimated drift; covariances are untouched.
PrototypeStore compensate_drift(const PrototypeStore& store, const Matrix& efm_prev, const Matrix& old_features,
                                const Matrix& new_features, const DriftCompensationConfig& config);
PrototypeStore compensate_drift(const PrototypeStore& store, const Matrix& efm_prev,
                                const FeatureExtractor& old_extractor, const FeatureExtractor& new_extractor,
                                const Matrix& current_inputs, const DriftCompensationConfig& config);

}  // namespace efc
