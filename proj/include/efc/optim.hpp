#pragma once

// First-order optimizers over flat parameter spans. Weight decay is an
// additive L2 term on the gradient. Each tensor is addressed by a slot id so
// the optimizer can keep per-tensor moment buffers.

#include "efc/model.hpp"

#include <memory>
#include <span>
#include <vector>

namespace efc {

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Starts a new step; bias corrections and counters advance here.
  virtual void begin_step() = 0;
  virtual void update(std::size_t slot, std::span<double> param, std::span<const double> grad) = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}
  void begin_step() override { ++step_; }
  void update(std::size_t slot, std::span<double> param, std::span<const double> grad) override;
  long long steps() const { return step_; }

 private:
  AdamConfig config_;
  long long step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(SgdConfig config) : config_(config) {}
  void begin_step() override {}
  void update(std::size_t slot, std::span<double> param, std::span<const double> grad) override;

 private:
  SgdConfig config_;
  std::vector<std::vector<double>> velocity_;
};

template <typename Derived>
std::span<double> flat(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename Derived>
std::span<const double> flat(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

/// Column block [range.begin, range.end) of a column-major matrix as a span.
inline std::span<double> column_block(Matrix& m, ClassRange range) {
  return {m.data() + range.begin * m.rows(), static_cast<std::size_t>(range.size() * m.rows())};
}
inline std::span<const double> column_block(const Matrix& m, ClassRange range) {
  return {m.data() + range.begin * m.rows(), static_cast<std::size_t>(range.size() * m.rows())};
}

/// Applies one optimizer update to every extractor tensor, using slots
/// [first_slot, first_slot + 2·layers).
void apply_gradients(Optimizer& opt, FeatureExtractor& extractor, const ExtractorGradients& grads,
                     std::size_t first_slot = 0);

}  // namespace efc
