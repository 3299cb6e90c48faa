#pragma once

// Feed-forward feature extractor with hand-written backpropagation, the
// growable linear classifier head, and softmax / cross-entropy helpers.
//
// Batches are matrices with one sample per row. A dense layer maps
// `in -> out` as H = X * weight + 1 * biasᵀ, with weight stored in x out.

#include "efc/linalg.hpp"

#include <span>
#include <vector>

namespace efc {

enum class Activation { relu, identity };

struct DenseLayer {
  Matrix weight;  // in x out
  Vector bias;    // out
  Activation activation = Activation::relu;

  Index in_dim() const { return weight.rows(); }
  Index out_dim() const { return weight.cols(); }
};

struct Architecture {
  Index input_dim = 64;
  std::vector<Index> hidden{128, 64};
  Index feature_dim = 64;
};

/// f(·; θ): ReLU hidden layers followed by a linear feature layer.
struct FeatureExtractor {
  std::vector<DenseLayer> layers;

  FeatureExtractor() = default;
  explicit FeatureExtractor(std::vector<DenseLayer> l) : layers(std::move(l)) {}
  /// He-uniform hidden layers, Glorot-uniform feature layer, zero biases.
  static FeatureExtractor make(const Architecture& arch, Rng& rng);

  Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Index feature_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
  Architecture architecture() const;
  Index parameter_count() const;
  bool all_finite() const;
};

/// Frozen copy of a feature extractor (the previous-task backbone).
class ModelSnapshot {
 public:
  explicit ModelSnapshot(FeatureExtractor extractor) : extractor_(std::move(extractor)) {}
  const FeatureExtractor& extractor() const { return extractor_; }

 private:
  FeatureExtractor extractor_;
};

/// Half-open column range [begin, end) of the classifier head.
struct ClassRange {
  Index begin = 0;
  Index end = 0;

  Index size() const { return end - begin; }
  bool contains(Index c) const { return c >= begin && c < end; }
  friend bool operator==(const ClassRange&, const ClassRange&) = default;
};

/// W_t: n x m weights, grown by one column block per task.
struct ClassifierHead {
  Matrix weights;
  std::vector<ClassRange> task_ranges;

  static ClassifierHead empty(Index feature_dim) { return {Matrix(feature_dim, 0), {}}; }
  Index feature_dim() const { return weights.rows(); }
  Index num_classes() const { return weights.cols(); }
  ClassRange all_classes() const { return {0, num_classes()}; }
  ClassRange last_task() const { return task_ranges.empty() ? ClassRange{} : task_ranges.back(); }
};

struct ForwardCache {
  std::vector<Matrix> inputs;  // inputs[l]: input of layer l
  std::vector<Matrix> pre;     // pre[l]: pre-activation of layer l
  Matrix features;             // batch x n
  Matrix logits;               // batch x m (empty when no head was given)
};

struct ExtractorGradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static ExtractorGradients zeros_like(const FeatureExtractor& extractor);
  ExtractorGradients& operator+=(const ExtractorGradients& other);
  bool all_finite() const;
};

Matrix extract_features(const FeatureExtractor& extractor, const Matrix& batch);
ForwardCache forward(const FeatureExtractor& extractor, const Matrix& batch);
ForwardCache forward(const FeatureExtractor& extractor, const ClassifierHead& head, const Matrix& batch);
Matrix compute_logits(const ClassifierHead& head, const Matrix& features);

/// Row-wise softmax, max-shifted.
Matrix softmax_rows(const Matrix& logits);
Vector softmax(const Vector& logits);

struct CrossEntropy {
  double loss = 0.0;
  Matrix dlogits;
};

/// Mean softmax cross-entropy using only the columns in `active`; labels are
/// global column indices and must fall inside `active`. dlogits is zero
/// outside the active block.
CrossEntropy softmax_cross_entropy(const Matrix& logits, std::span<const int> labels, ClassRange active);

/// Gradients of the pre-activation at every layer, given dL/dfeatures.
std::vector<Matrix> backward_deltas(const FeatureExtractor& extractor, const ForwardCache& cache,
                                    const Matrix& dfeatures);
ExtractorGradients backward(const FeatureExtractor& extractor, const ForwardCache& cache,
                            const Matrix& dfeatures);

/// dL/dW = featuresᵀ · dlogits.
inline Matrix head_gradient(const Matrix& features, const Matrix& dlogits) {
  return features.transpose() * dlogits;
}
/// dL/dfeatures = dlogits · Wᵀ.
inline Matrix features_gradient(const ClassifierHead& head, const Matrix& dlogits) {
  return dlogits * head.weights.transpose();
}

/// Appends `new_classes` columns drawn from U(-1/√n, 1/√n). Existing columns
/// are copied verbatim.
ClassifierHead expand_head(const ClassifierHead& head, Index new_classes, Rng& rng);

/// Row-wise argmax; ties go to the lowest column index.
std::vector<int> predict(const Matrix& logits);

}  // namespace efc
