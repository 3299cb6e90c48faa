#pragma once

// Drift regularizers applied while training the backbone on a new task: the
// EFM pseudo-metric penalty and the ablation family (feature distillation,
// diagonal E-FIM / EWC, knowledge distillation).

#include "efc/efm.hpp"
#include "efc/model.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace efc {

enum class RegularizerKind { efm, fd, efim, kd, none };

std::string_view to_string(RegularizerKind kind);
RegularizerKind parse_regularizer(std::string_view name);

struct RegularizerConfig {
  RegularizerKind kind = RegularizerKind::efm;
  double lambda_efm = 10.0;
  double eta = 0.1;
  double lambda_fd = 1.0;
  bool fd_squared = false;  // false: λ Σ‖δ‖ over the batch; true: λ mean ‖δ‖²
  double lambda_efim = 100000.0;
  double lambda_kd = 50.0;
  double kd_temperature = 2.0;

  void validate() const;
};

/// λ_EFM · ν_max > η. When this fails the penalty is dominated by the
/// isotropic damping term and behaves like feature distillation.
bool plasticity_constraint_holds(const RegularizerConfig& config, const Spectrum& spectrum);

struct FeaturePenalty {
  double loss = 0.0;
  Matrix dfeatures;
};

/// mean_b δ_bᵀ(λE + ηI)δ_b with δ = current − previous. Gradient flows into
/// the current features only.
FeaturePenalty efm_penalty(const Matrix& current, const Matrix& previous, const Matrix& efm,
                           const RegularizerConfig& config);

/// Unsquared: λ Σ_b ‖δ_b‖₂. Squared: λ · mean_b ‖δ_b‖².
FeaturePenalty fd_penalty(const Matrix& current, const Matrix& previous, double lambda_fd, bool squared = false);

/// Diagonal empirical Fisher over the backbone parameters, with the anchor
/// parameters it was measured at.
struct DiagonalEFIM {
  ExtractorGradients importance;
  FeatureExtractor anchor;
};

/// Diagonal of E_x E_{y~p(y|x)} [(∂log p_y/∂θ)²], the label expectation taken
/// exactly over the softmax.
DiagonalEFIM diag_efim_estimate(const FeatureExtractor& extractor, const ClassifierHead& head,
                                const Matrix& inputs);

struct ParameterPenalty {
  double loss = 0.0;
  ExtractorGradients gradients;
};

/// λ Σ_i F_i (θ_i − θ*_i)².
ParameterPenalty ewc_penalty(const FeatureExtractor& extractor, const DiagonalEFIM& anchor, double lambda_efim);

struct LogitPenalty {
  double loss = 0.0;
  Matrix dlogits;
};

/// λ · mean_b CE(softmax(prev/T), softmax(cur/T)) over the old-task columns.
LogitPenalty kd_penalty(const Matrix& current_old_logits, const Matrix& previous_logits, double temperature,
                        double lambda_kd);

}  // namespace efc
