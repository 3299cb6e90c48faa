#include "efc/optim.hpp"

#include <cmath>

namespace efc {
namespace {

std::vector<double>& buffer(std::vector<std::vector<double>>& buffers, std::size_t slot, std::size_t size) {
  if (buffers.size() <= slot) buffers.resize(slot + 1);
  auto& b = buffers[slot];
  if (b.empty()) b.assign(size, 0.0);
  if (b.size() != size) throw DimensionError("optimizer: slot reused with a different tensor size");
  return b;
}

}  // namespace

void Adam::update(std::size_t slot, std::span<double> param, std::span<const double> grad) {
  if (param.size() != grad.size()) throw DimensionError("Adam: parameter/gradient size mismatch");
  if (step_ == 0) throw std::logic_error("Adam: begin_step() not called");
  auto& m = buffer(m_, slot, param.size());
  auto& v = buffer(v_, slot, param.size());
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + config_.weight_decay * param[i];
    m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
    v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    param[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
  }
}

void Sgd::update(std::size_t slot, std::span<double> param, std::span<const double> grad) {
  if (param.size() != grad.size()) throw DimensionError("Sgd: parameter/gradient size mismatch");
  if (config_.momentum == 0.0) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      param[i] -= config_.lr * (grad[i] + config_.weight_decay * param[i]);
    }
    return;
  }
  auto& vel = buffer(velocity_, slot, param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + config_.weight_decay * param[i];
    vel[i] = config_.momentum * vel[i] + g;
    param[i] -= config_.lr * vel[i];
  }
}

void apply_gradients(Optimizer& opt, FeatureExtractor& extractor, const ExtractorGradients& grads,
                     std::size_t first_slot) {
  if (grads.weight.size() != extractor.layers.size()) {
    throw DimensionError("apply_gradients: gradient layer count mismatch");
  }
  for (std::size_t l = 0; l < extractor.layers.size(); ++l) {
    auto& layer = extractor.layers[l];
    opt.update(first_slot + 2 * l, flat(layer.weight), flat(grads.weight[l]));
    opt.update(first_slot + 2 * l + 1, flat(layer.bias), flat(grads.bias[l]));
  }
}

}  // namespace efc
