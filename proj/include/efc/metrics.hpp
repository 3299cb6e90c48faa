#pragma once

// Evaluation quantities: the accuracy triangle and the metrics derived from
// it (per-step and average incremental accuracy, forgetting, plasticity),
// plus the class-mean drift and prototype-gap diagnostics.
//
// Tasks are indexed 0..T-1 internally. `start` only records the conventional
// numbering of the first task (0 in warm start, 1 in cold start) for output.

#include "efc/linalg.hpp"
#include "efc/model.hpp"
#include "efc/prototypes.hpp"

#include <iosfwd>
#include <span>
#include <map>
#include <string>
#include <vector>

namespace efc {

class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  AccuracyMatrix(std::vector<int> class_counts, int start);

  std::size_t num_tasks() const { return counts_.size(); }
  int start() const { return start_; }
  const std::vector<int>& class_counts() const { return counts_; }

  /// a_i^k: accuracy on task i after training task k (i <= k).
  void set(std::size_t k, std::size_t i, double accuracy);
  double at(std::size_t k, std::size_t i) const;
  bool has(std::size_t k, std::size_t i) const;
  /// Last row k with every entry filled, or -1.
  long last_complete_step() const;

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::vector<int> counts_;
  int start_ = 1;
  std::vector<std::vector<double>> rows_;  // rows_[k][i], NaN when unset
};

/// Σ_{i≤k} |C_i| a_i^k / Σ_{i≤k} |C_i|.
double per_step_accuracy(const AccuracyMatrix& m, std::size_t k);
/// Mean of per_step_accuracy over steps 0..k.
double avg_inc_accuracy(const AccuracyMatrix& m, std::size_t k);
/// Mean over j<k of max_{j≤i≤k} a_j^i − a_j^k. Requires k ≥ 1.
double forgetting(const AccuracyMatrix& m, std::size_t k);
/// Mean of the diagonal a_i^i for i ≤ k.
double plasticity(const AccuracyMatrix& m, std::size_t k);

struct MetricsReport {
  double a_step = 0.0;
  double a_inc = 0.0;
  double forgetting = 0.0;  // 0 when only one task has been seen
  double plasticity = 0.0;
};

MetricsReport compute_report(const AccuracyMatrix& m, std::size_t k);
MetricsReport compute_report(const AccuracyMatrix& m);

/// Per-step series of each metric, indexed by k.
struct MetricsCurves {
  std::vector<double> a_step, a_inc, forgetting, plasticity;
};
MetricsCurves compute_curves(const AccuracyMatrix& m);

/// Rows are k, columns are i; unset cells are empty. Values use %.17g so the
/// file round-trips exactly.
void write_accuracy_csv(std::ostream& os, const AccuracyMatrix& m);
AccuracyMatrix read_accuracy_csv(std::istream& is);
std::string report_json(const MetricsReport& r);

/// Fraction of rows whose argmax over all columns equals the label.
double accuracy(const Matrix& logits, std::span<const int> labels);

struct ClassDrift {
  int class_id = -1;
  Vector delta_mean;     // μ_t − μ_{t−1}
  double pseudo_norm = 0.0;  // Δμᵀ E Δμ
  double euclidean_sq = 0.0;
};

struct DriftReport {
  std::vector<ClassDrift> classes;
  double average = 0.0;  // mean pseudo-norm over the probed classes
};

/// Class-mean drift between two backbones, measured with the metric `efm`.
DriftReport class_mean_drift(const FeatureExtractor& old_extractor, const FeatureExtractor& new_extractor,
                             const Matrix& efm, const std::map<int, Matrix>& inputs_by_class);

struct PrototypeGap {
  int class_id = -1;
  double euclidean = 0.0;
  double pseudo = 0.0;  // sqrt((p − μ)ᵀ E (p − μ))
};

std::vector<PrototypeGap> prototype_gap(const PrototypeStore& store, const std::map<int, Vector>& true_means,
                                        const Matrix& efm);

/// Per-class feature means of the rows of `features`.
std::map<int, Vector> class_means(const Matrix& features, std::span<const int> labels);

}  // namespace efc
