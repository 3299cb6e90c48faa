#include "efc/prototypes.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace efc {

Matrix ClassPrototype::full_covariance() const {
  if (!diagonal) return covariance;
  return covariance.col(0).asDiagonal();
}

ClassPrototype make_prototype(int class_id, Vector mean, Matrix covariance, std::size_t origin_task,
                              bool diagonal) {
  ClassPrototype p;
  p.class_id = class_id;
  p.mean = std::move(mean);
  p.covariance = std::move(covariance);
  p.origin_task = origin_task;
  p.diagonal = diagonal;
  if (!p.mean.allFinite()) throw NumericalError("prototype mean for class " + std::to_string(class_id) + " is not finite");
  if (diagonal) {
    if (p.covariance.rows() != p.dim() || p.covariance.cols() != 1) {
      throw DimensionError("diagonal prototype covariance must be n x 1");
    }
    p.sampling_factor = p.covariance.col(0).cwiseMax(0.0).cwiseSqrt().asDiagonal();
  } else {
    if (p.covariance.rows() != p.dim() || p.covariance.cols() != p.dim()) {
      throw DimensionError("prototype covariance must be n x n");
    }
    p.sampling_factor = ridged_cholesky(p.covariance);
  }
  return p;
}

void PrototypeStore::add(ClassPrototype prototype) {
  const int id = prototype.class_id;
  if (!entries_.emplace(id, std::move(prototype)).second) {
    throw std::invalid_argument("prototype store already holds class " + std::to_string(id));
  }
}

const ClassPrototype& PrototypeStore::at(int class_id) const {
  auto it = entries_.find(class_id);
  if (it == entries_.end()) throw std::out_of_range("no prototype for class " + std::to_string(class_id));
  return it->second;
}

std::vector<int> PrototypeStore::class_ids() const {
  std::vector<int> ids;
  ids.reserve(entries_.size());
  for (const auto& [id, _] : entries_) ids.push_back(id);
  return ids;
}

void PrototypeStore::shift_mean(int class_id, const Vector& delta) {
  auto it = entries_.find(class_id);
  if (it == entries_.end()) throw std::out_of_range("no prototype for class " + std::to_string(class_id));
  if (delta.size() != it->second.dim()) throw DimensionError("shift_mean: dimension mismatch");
  it->second.mean += delta;
}

void DriftCompensationConfig::validate() const {
  if (!(bandwidth_sq > 0)) throw std::invalid_argument("drift bandwidth σ² must be positive");
}

std::vector<ClassPrototype> compute_class_stats(const Matrix& features, std::span<const int> labels,
                                                std::span<const int> class_ids, std::size_t origin_task,
                                                bool diagonal_only) {
  if (static_cast<Index>(labels.size()) != features.rows()) {
    throw DimensionError("compute_class_stats: label count mismatch");
  }
  std::vector<ClassPrototype> out;
  for (const int c : class_ids) {
    std::vector<Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) rows.push_back(static_cast<Index>(i));
    }
    if (rows.size() < 2) {
      throw std::invalid_argument("class " + std::to_string(c) + " has fewer than 2 samples");
    }
    Matrix block(static_cast<Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) block.row(static_cast<Index>(r)) = features.row(rows[r]);
    Vector mean = block.colwise().mean().transpose();
    const Matrix centred = block.rowwise() - mean.transpose();
    const double inv = 1.0 / static_cast<double>(rows.size());
    Matrix cov;
    if (diagonal_only) {
      cov = (centred.cwiseAbs2().colwise().sum().transpose() * inv).eval();
    } else {
      cov = Matrix::Zero(features.cols(), features.cols());
      cov.selfadjointView<Eigen::Lower>().rankUpdate(centred.transpose(), inv);
      cov.triangularView<Eigen::StrictlyUpper>() = cov.transpose();
    }
    out.push_back(make_prototype(c, std::move(mean), std::move(cov), origin_task, diagonal_only));
  }
  return out;
}

std::vector<ClassPrototype> compute_class_stats(const FeatureExtractor& extractor, const Matrix& inputs,
                                                std::span<const int> labels, std::span<const int> class_ids,
                                                std::size_t origin_task, bool diagonal_only) {
  return compute_class_stats(extract_features(extractor, inputs), labels, class_ids, origin_task, diagonal_only);
}

LabeledFeatures sample_pseudo_features(const PrototypeStore& store,
                                       std::span<const std::pair<int, Index>> quotas, Rng& rng) {
  Index total = 0;
  Index dim = -1;
  for (const auto& [c, count] : quotas) {
    const auto& p = store.at(c);
    if (dim >= 0 && p.dim() != dim) throw DimensionError("sample_pseudo_features: mixed prototype dimensions");
    dim = p.dim();
    total += count;
  }
  LabeledFeatures out;
  out.features.resize(total, std::max<Index>(dim, 0));
  out.labels.reserve(static_cast<std::size_t>(total));
  Index row = 0;
  for (const auto& [c, count] : quotas) {
    if (count <= 0) continue;
    const auto& p = store.at(c);
    out.features.middleRows(row, count) = sample_gaussian_factored(p.mean, p.sampling_factor, count, rng);
    out.labels.insert(out.labels.end(), static_cast<std::size_t>(count), c);
    row += count;
  }
  return out;
}

LabeledFeatures sample_pseudo_features(const PrototypeStore& store, std::span<const int> class_ids,
                                       Index count_per_class, Rng& rng) {
  std::vector<std::pair<int, Index>> quotas;
  for (const int c : class_ids) quotas.emplace_back(c, count_per_class);
  return sample_pseudo_features(store, quotas, rng);
}

namespace {

Vector log_weights(const Vector& prototype, const Matrix& old_features, const Matrix& efm, double bandwidth_sq) {
  if (old_features.cols() != prototype.size() || efm.rows() != prototype.size() || efm.cols() != prototype.size()) {
    throw DimensionError("drift weights: dimension mismatch");
  }
  const Matrix diff = old_features.rowwise() - prototype.transpose();
  const Vector dist = (diff * efm).cwiseProduct(diff).rowwise().sum();
  return -dist.cwiseMax(0.0) / (2.0 * bandwidth_sq);
}

}  // namespace

Vector drift_weights(const Vector& prototype, const Matrix& old_features, const Matrix& efm, double bandwidth_sq) {
  return log_weights(prototype, old_features, efm, bandwidth_sq).array().exp();
}

Vector estimate_prototype_drift(const Vector& prototype, const Matrix& old_features, const Matrix& new_features,
                                const Matrix& efm, double bandwidth_sq) {
  if (old_features.rows() != new_features.rows() || old_features.cols() != new_features.cols()) {
    throw DimensionError("estimate_prototype_drift: feature batches not aligned");
  }
  if (old_features.rows() == 0) return Vector::Zero(prototype.size());
  const Vector logw = log_weights(prototype, old_features, efm, bandwidth_sq);
  const Vector w = (logw.array() - logw.maxCoeff()).exp();
  const Matrix delta = new_features - old_features;
  return (delta.transpose() * w) / w.sum();
}

PrototypeStore compensate_drift(const PrototypeStore& store, const Matrix& efm_prev, const Matrix& old_features,
                                const Matrix& new_features, const DriftCompensationConfig& config) {
  config.validate();
  PrototypeStore out = store;
  for (const auto& [id, proto] : store.entries()) {
    out.shift_mean(id, estimate_prototype_drift(proto.mean, old_features, new_features, efm_prev,
                                                config.bandwidth_sq));
  }
  return out;
}

PrototypeStore compensate_drift(const PrototypeStore& store, const Matrix& efm_prev,
                                const FeatureExtractor& old_extractor, const FeatureExtractor& new_extractor,
                                const Matrix& current_inputs, const DriftCompensationConfig& config) {
  return compensate_drift(store, efm_prev, extract_features(old_extractor, current_inputs),
                          extract_features(new_extractor, current_inputs), config);
}

}  // namespace efc
