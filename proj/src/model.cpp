#include "efc/model.hpp"

#include <cmath>
#include <string>

namespace efc {
namespace {

Matrix apply_activation(const Matrix& pre, Activation act) {
  if (act == Activation::identity) return pre;
  return pre.cwiseMax(0.0);
}

void fill_uniform(Matrix& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
  }
}

}  // namespace

FeatureExtractor FeatureExtractor::make(const Architecture& arch, Rng& rng) {
  std::vector<Index> dims{arch.input_dim};
  dims.insert(dims.end(), arch.hidden.begin(), arch.hidden.end());
  dims.push_back(arch.feature_dim);
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool last = l + 2 == dims.size();
    DenseLayer layer;
    layer.weight.resize(dims[l], dims[l + 1]);
    const double fan_in = static_cast<double>(dims[l]);
    const double bound = last ? std::sqrt(6.0 / (fan_in + static_cast<double>(dims[l + 1])))
                              : std::sqrt(6.0 / fan_in);
    fill_uniform(layer.weight, bound, rng);
    layer.bias = Vector::Zero(dims[l + 1]);
    layer.activation = last ? Activation::identity : Activation::relu;
    layers.push_back(std::move(layer));
  }
  return FeatureExtractor(std::move(layers));
}

Architecture FeatureExtractor::architecture() const {
  Architecture arch;
  arch.input_dim = input_dim();
  arch.hidden.clear();
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) arch.hidden.push_back(layers[l].out_dim());
  arch.feature_dim = feature_dim();
  return arch;
}

Index FeatureExtractor::parameter_count() const {
  Index total = 0;
  for (const auto& l : layers) total += l.weight.size() + l.bias.size();
  return total;
}

bool FeatureExtractor::all_finite() const {
  for (const auto& l : layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

ExtractorGradients ExtractorGradients::zeros_like(const FeatureExtractor& extractor) {
  ExtractorGradients g;
  for (const auto& l : extractor.layers) {
    g.weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Vector::Zero(l.bias.size()));
  }
  return g;
}

ExtractorGradients& ExtractorGradients::operator+=(const ExtractorGradients& other) {
  if (other.weight.size() != weight.size()) throw DimensionError("ExtractorGradients: layer count mismatch");
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] += other.weight[l];
    bias[l] += other.bias[l];
  }
  return *this;
}

bool ExtractorGradients::all_finite() const {
  for (std::size_t l = 0; l < weight.size(); ++l) {
    if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
  }
  return true;
}

ForwardCache forward(const FeatureExtractor& extractor, const Matrix& batch) {
  if (batch.cols() != extractor.input_dim()) {
    throw DimensionError("forward: input width " + std::to_string(batch.cols()) + " != extractor input dim " +
                         std::to_string(extractor.input_dim()));
  }
  ForwardCache cache;
  cache.inputs.reserve(extractor.layers.size());
  cache.pre.reserve(extractor.layers.size());
  Matrix x = batch;
  for (const auto& layer : extractor.layers) {
    Matrix pre = x * layer.weight;
    pre.rowwise() += layer.bias.transpose();
    Matrix post = apply_activation(pre, layer.activation);
    cache.inputs.push_back(std::move(x));
    cache.pre.push_back(std::move(pre));
    x = std::move(post);
  }
  cache.features = std::move(x);
  return cache;
}

ForwardCache forward(const FeatureExtractor& extractor, const ClassifierHead& head, const Matrix& batch) {
  ForwardCache cache = forward(extractor, batch);
  cache.logits = compute_logits(head, cache.features);
  return cache;
}

Matrix extract_features(const FeatureExtractor& extractor, const Matrix& batch) {
  if (batch.cols() != extractor.input_dim()) throw DimensionError("extract_features: input width mismatch");
  Matrix x = batch;
  for (const auto& layer : extractor.layers) {
    Matrix pre = x * layer.weight;
    pre.rowwise() += layer.bias.transpose();
    x = apply_activation(pre, layer.activation);
  }
  return x;
}

Matrix compute_logits(const ClassifierHead& head, const Matrix& features) {
  if (features.cols() != head.feature_dim()) throw DimensionError("compute_logits: feature width mismatch");
  return features * head.weights;
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) return logits;
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  if (logits.cols() == 0) return out;
  for (Index r = 0; r < logits.rows(); ++r) {
    const double top = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - top).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

CrossEntropy softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, ClassRange active) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw DimensionError("softmax_cross_entropy: label count != batch size");
  }
  if (active.begin < 0 || active.end > logits.cols() || active.size() <= 0) {
    throw DimensionError("softmax_cross_entropy: active column range out of bounds");
  }
  const Index batch = logits.rows();
  CrossEntropy out;
  out.dlogits = Matrix::Zero(logits.rows(), logits.cols());
  if (batch == 0) return out;
  const double inv_batch = 1.0 / static_cast<double>(batch);
  double total = 0.0;
  for (Index r = 0; r < batch; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (!active.contains(label)) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside active columns [" + std::to_string(active.begin) + ", " +
                              std::to_string(active.end) + ")");
    }
    auto z = logits.row(r).segment(active.begin, active.size());
    const double top = z.maxCoeff();
    const double lse = top + std::log((z.array() - top).exp().sum());
    total += lse - logits(r, label);
    auto p = (z.array() - lse).exp();
    out.dlogits.row(r).segment(active.begin, active.size()) = p.matrix() * inv_batch;
    out.dlogits(r, label) -= inv_batch;
  }
  out.loss = total * inv_batch;
  return out;
}

std::vector<Matrix> backward_deltas(const FeatureExtractor& extractor, const ForwardCache& cache,
                                    const Matrix& dfeatures) {
  const std::size_t n_layers = extractor.layers.size();
  if (cache.pre.size() != n_layers || cache.inputs.size() != n_layers) {
    throw DimensionError("backward: cache does not match extractor");
  }
  if (dfeatures.rows() != cache.features.rows() || dfeatures.cols() != extractor.feature_dim()) {
    throw DimensionError("backward: dfeatures must be batch x feature_dim");
  }
  std::vector<Matrix> deltas(n_layers);
  Matrix upstream = dfeatures;
  for (std::size_t i = n_layers; i-- > 0;) {
    const auto& layer = extractor.layers[i];
    if (layer.activation == Activation::relu) {
      upstream = (cache.pre[i].array() > 0.0).select(upstream, 0.0);
    }
    deltas[i] = upstream;
    if (i > 0) upstream = deltas[i] * layer.weight.transpose();
  }
  return deltas;
}

ExtractorGradients backward(const FeatureExtractor& extractor, const ForwardCache& cache,
                            const Matrix& dfeatures) {
  const auto deltas = backward_deltas(extractor, cache, dfeatures);
  ExtractorGradients g;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    g.weight.push_back(cache.inputs[i].transpose() * deltas[i]);
    g.bias.push_back(deltas[i].colwise().sum().transpose());
  }
  return g;
}

ClassifierHead expand_head(const ClassifierHead& head, Index new_classes, Rng& rng) {
  if (new_classes < 1) throw std::invalid_argument("expand_head: new_classes must be >= 1");
  const Index n = head.feature_dim();
  const Index m = head.num_classes();
  ClassifierHead out;
  out.weights.resize(n, m + new_classes);
  out.weights.leftCols(m) = head.weights;
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(n, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index c = m; c < m + new_classes; ++c) {
    for (Index r = 0; r < n; ++r) out.weights(r, c) = dist(rng);
  }
  out.task_ranges = head.task_ranges;
  out.task_ranges.push_back({m, m + new_classes});
  return out;
}

std::vector<int> predict(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()), -1);
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    if (logits.cols() > 0) out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace efc
