#include "efc/regularizers.hpp"

#include <cmath>
#include <stdexcept>

namespace efc {
namespace {

void require_aligned(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": batches are not aligned");
  }
}

}  // namespace

std::string_view to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::efm: return "efm";
    case RegularizerKind::fd: return "fd";
    case RegularizerKind::efim: return "efim";
    case RegularizerKind::kd: return "kd";
    case RegularizerKind::none: return "none";
  }
  return "none";
}

RegularizerKind parse_regularizer(std::string_view name) {
  if (name == "efm") return RegularizerKind::efm;
  if (name == "fd") return RegularizerKind::fd;
  if (name == "efim" || name == "ewc") return RegularizerKind::efim;
  if (name == "kd") return RegularizerKind::kd;
  if (name == "none") return RegularizerKind::none;
  throw std::invalid_argument("unknown regularizer '" + std::string(name) + "'");
}

void RegularizerConfig::validate() const {
  if (lambda_efm < 0 || eta < 0 || lambda_fd < 0 || lambda_efim < 0 || lambda_kd < 0) {
    throw std::invalid_argument("regularizer strengths must be non-negative");
  }
  if (!(kd_temperature > 0)) throw std::invalid_argument("kd_temperature must be positive");
}

bool plasticity_constraint_holds(const RegularizerConfig& config, const Spectrum& spectrum) {
  if (spectrum.eigenvalues.size() == 0) return false;
  return config.lambda_efm * spectrum.eigenvalues[0] > config.eta;
}

FeaturePenalty efm_penalty(const Matrix& current, const Matrix& previous, const Matrix& efm,
                           const RegularizerConfig& config) {
  require_aligned(current, previous, "efm_penalty");
  if (efm.rows() != current.cols() || efm.cols() != current.cols()) {
    throw DimensionError("efm_penalty: EFM is " + std::to_string(efm.rows()) + "x" + std::to_string(efm.cols()) +
                         " but features have width " + std::to_string(current.cols()));
  }
  FeaturePenalty out;
  out.dfeatures = Matrix::Zero(current.rows(), current.cols());
  if (current.rows() == 0) return out;
  const Matrix delta = current - previous;
  const Matrix metric_delta = delta * efm;  // rows: (E δ_b)ᵀ, E symmetric
  const double inv_batch = 1.0 / static_cast<double>(current.rows());
  const double curvature = delta.cwiseProduct(metric_delta).sum();
  const double damping = delta.squaredNorm();
  out.loss = (config.lambda_efm * curvature + config.eta * damping) * inv_batch;
  out.dfeatures = (2.0 * inv_batch) * (config.lambda_efm * metric_delta + config.eta * delta);
  return out;
}

FeaturePenalty fd_penalty(const Matrix& current, const Matrix& previous, double lambda_fd, bool squared) {
  require_aligned(current, previous, "fd_penalty");
  FeaturePenalty out;
  out.dfeatures = Matrix::Zero(current.rows(), current.cols());
  if (current.rows() == 0) return out;
  const Matrix delta = current - previous;
  if (squared) {
    const double inv_batch = 1.0 / static_cast<double>(current.rows());
    out.loss = lambda_fd * (delta.squaredNorm() * inv_batch);
    out.dfeatures = (2.0 * lambda_fd * inv_batch) * delta;
    return out;
  }
  for (Index b = 0; b < delta.rows(); ++b) {
    const double norm = delta.row(b).norm();
    out.loss += norm;
    if (norm > 0.0) out.dfeatures.row(b) = (lambda_fd / norm) * delta.row(b);
  }
  out.loss *= lambda_fd;
  return out;
}

DiagonalEFIM diag_efim_estimate(const FeatureExtractor& extractor, const ClassifierHead& head,
                                const Matrix& inputs) {
  if (inputs.rows() == 0) throw std::invalid_argument("diag_efim_estimate: empty data");
  const ForwardCache cache = forward(extractor, head, inputs);
  const Matrix probs = softmax_rows(cache.logits);
  const Index batch = inputs.rows();
  const Index m = head.num_classes();

  std::vector<Matrix> sq_inputs;
  for (const auto& x : cache.inputs) sq_inputs.push_back(x.cwiseAbs2());

  DiagonalEFIM out{ExtractorGradients::zeros_like(extractor), extractor};
  for (Index y = 0; y < m; ++y) {
    // ∂log p_y/∂z = e_y − p, per sample.
    Matrix dlogits = -probs;
    dlogits.col(y).array() += 1.0;
    const auto deltas = backward_deltas(extractor, cache, features_gradient(head, dlogits));
    for (std::size_t l = 0; l < deltas.size(); ++l) {
      // Per-sample weight gradient is an outer product, so its square factors.
      const Matrix weighted_sq = probs.col(y).asDiagonal() * deltas[l].cwiseAbs2();
      out.importance.weight[l].noalias() += sq_inputs[l].transpose() * weighted_sq;
      out.importance.bias[l] += weighted_sq.colwise().sum().transpose();
    }
  }
  const double inv = 1.0 / static_cast<double>(batch);
  for (std::size_t l = 0; l < out.importance.weight.size(); ++l) {
    out.importance.weight[l] *= inv;
    out.importance.bias[l] *= inv;
  }
  return out;
}

ParameterPenalty ewc_penalty(const FeatureExtractor& extractor, const DiagonalEFIM& anchor, double lambda_efim) {
  if (anchor.anchor.layers.size() != extractor.layers.size() ||
      anchor.importance.weight.size() != extractor.layers.size()) {
    throw DimensionError("ewc_penalty: anchor does not match model");
  }
  ParameterPenalty out{0.0, ExtractorGradients::zeros_like(extractor)};
  for (std::size_t l = 0; l < extractor.layers.size(); ++l) {
    const auto& cur = extractor.layers[l];
    const auto& ref = anchor.anchor.layers[l];
    if (cur.weight.rows() != ref.weight.rows() || cur.weight.cols() != ref.weight.cols() ||
        anchor.importance.weight[l].rows() != cur.weight.rows() ||
        anchor.importance.weight[l].cols() != cur.weight.cols()) {
      throw DimensionError("ewc_penalty: layer shape mismatch");
    }
    const Matrix dw = cur.weight - ref.weight;
    const Vector db = cur.bias - ref.bias;
    out.loss += anchor.importance.weight[l].cwiseProduct(dw.cwiseAbs2()).sum();
    out.loss += anchor.importance.bias[l].cwiseProduct(db.cwiseAbs2()).sum();
    out.gradients.weight[l] = (2.0 * lambda_efim) * anchor.importance.weight[l].cwiseProduct(dw);
    out.gradients.bias[l] = (2.0 * lambda_efim) * anchor.importance.bias[l].cwiseProduct(db);
  }
  out.loss *= lambda_efim;
  return out;
}

LogitPenalty kd_penalty(const Matrix& current_old_logits, const Matrix& previous_logits, double temperature,
                        double lambda_kd) {
  require_aligned(current_old_logits, previous_logits, "kd_penalty");
  if (!(temperature > 0)) throw std::invalid_argument("kd_penalty: temperature must be positive");
  LogitPenalty out;
  out.dlogits = Matrix::Zero(current_old_logits.rows(), current_old_logits.cols());
  if (current_old_logits.rows() == 0 || current_old_logits.cols() == 0) return out;
  const Matrix target = softmax_rows(previous_logits / temperature);
  const Matrix scaled = current_old_logits / temperature;
  const Matrix student = softmax_rows(scaled);
  const double inv_batch = 1.0 / static_cast<double>(current_old_logits.rows());
  double total = 0.0;
  for (Index b = 0; b < scaled.rows(); ++b) {
    const double top = scaled.row(b).maxCoeff();
    const double lse = top + std::log((scaled.row(b).array() - top).exp().sum());
    total += -(target.row(b).array() * (scaled.row(b).array() - lse)).sum();
  }
  out.loss = lambda_kd * total * inv_batch;
  out.dlogits = (lambda_kd * inv_batch / temperature) * (student - target);
  return out;
}

}  // namespace efc
