#include "efc/trainer.hpp"

#include "efc/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace efc {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::efcpp: return "efcpp";
    case Strategy::efc: return "efc";
    case Strategy::finetune: return "finetune";
    case Strategy::reg_ablation: return "reg_ablation";
  }
  return "efcpp";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "efcpp" || name == "efc++") return Strategy::efcpp;
  if (name == "efc") return Strategy::efc;
  if (name == "finetune") return Strategy::finetune;
  if (name == "reg_ablation") return Strategy::reg_ablation;
  throw std::invalid_argument("unknown strategy '" + name + "' (efcpp, efc, finetune, reg_ablation)");
}

void TrainConfig::validate() const {
  if (epochs <= 0 || first_task_epochs <= 0 || rebalance_epochs < 0 || batch_size <= 0) {
    throw std::invalid_argument("epochs, first_task_epochs and batch_size must be positive, rebalance_epochs >= 0");
  }
  if (!(lr_backbone > 0) || !(lr_new_head > 0) || !(lr_rebalance > 0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (weight_decay < 0 || rebalance_momentum < 0 || rebalance_momentum >= 1) {
    throw std::invalid_argument("weight_decay must be >= 0 and rebalance_momentum in [0, 1)");
  }
  if (architecture.input_dim <= 0 || architecture.feature_dim <= 0) {
    throw std::invalid_argument("architecture dimensions must be positive");
  }
  for (const Index h : architecture.hidden) {
    if (h <= 0) throw std::invalid_argument("hidden widths must be positive");
  }
  regularizer.validate();
  drift.validate();
}

TaskState init_state(const TrainConfig& config, Index input_dim) {
  TaskState state;
  state.rng.seed(config.seed);
  Architecture arch = config.architecture;
  arch.input_dim = input_dim;
  state.model = FeatureExtractor::make(arch, state.rng);
  state.head = ClassifierHead::empty(arch.feature_dim);
  return state;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Matrix gather_rows(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = m.row(rows[r]);
  return out;
}

std::vector<int> gather_labels(std::span<const int> labels, std::span<const Index> rows) {
  std::vector<int> out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = labels[static_cast<std::size_t>(rows[r])];
  return out;
}

std::vector<Index> permutation(Index n, Rng& rng) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index{0});
  for (std::size_t i = p.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(p[i - 1], p[pick(rng)]);
  }
  return p;
}

void require_finite(double loss, const char* phase, std::size_t task, int epoch) {
  if (!std::isfinite(loss)) {
    throw NumericalError(std::string(phase) + ": non-finite loss at task " + std::to_string(task) + ", epoch " +
                         std::to_string(epoch));
  }
}

// Previous-backbone quantities that stay fixed during a task.
struct Reference {
  Matrix features;    // f(x; θ_{t−1}) for every training row
  Matrix old_logits;  // f(x; θ_{t−1}) W_{t−1} over the old columns
  Matrix old_head;    // W_{t−1}
};

Reference make_reference(const TaskState& state, const TaskData& data, const TrainConfig& config) {
  Reference ref;
  if (!state.snapshot) return ref;
  ref.features = extract_features(state.snapshot->extractor(), data.inputs);
  if (config.regularizer.kind == RegularizerKind::kd) {
    ref.old_head = state.head.weights.leftCols(data.class_begin);
    ref.old_logits = ref.features * ref.old_head;
  }
  return ref;
}

// Adds the configured regularizer for one batch. Returns its loss.
double add_regularizer(const TaskState& state, const TrainConfig& config, const Reference& ref,
                       std::span<const Index> rows, const Matrix& features, Matrix& dfeatures,
                       ExtractorGradients& grads) {
  if (!state.snapshot) return 0.0;
  const auto& rc = config.regularizer;
  switch (rc.kind) {
    case RegularizerKind::none: return 0.0;
    case RegularizerKind::efm: {
      if (!state.efm) throw std::logic_error("EFM regularizer needs the previous task EFM");
      const auto p = efm_penalty(features, gather_rows(ref.features, rows), state.efm->matrix, rc);
      dfeatures += p.dfeatures;
      return p.loss;
    }
    case RegularizerKind::fd: {
      const auto p = fd_penalty(features, gather_rows(ref.features, rows), rc.lambda_fd, rc.fd_squared);
      dfeatures += p.dfeatures;
      return p.loss;
    }
    case RegularizerKind::kd: {
      if (ref.old_head.cols() == 0) return 0.0;
      const Matrix student = features * ref.old_head;
      const auto p = kd_penalty(student, gather_rows(ref.old_logits, rows), rc.kd_temperature, rc.lambda_kd);
      dfeatures.noalias() += p.dlogits * ref.old_head.transpose();
      return p.loss;
    }
    case RegularizerKind::efim: {
      if (!state.efim) throw std::logic_error("E-FIM regularizer needs the previous task importances");
      const auto p = ewc_penalty(state.model, *state.efim, rc.lambda_efim);
      grads += p.gradients;
      return p.loss;
    }
  }
  return 0.0;
}

// Shared epoch loop for backbone phases. `ce_range` is the column block the
// cross-entropy sees; `head_range` is the block the optimizer may move.
PhaseLog backbone_loop(TaskState& state, const TaskData& data, const TrainConfig& config, ClassRange ce_range,
                       ClassRange head_range, bool regularize, const char* name) {
  const auto t0 = Clock::now();
  PhaseLog log;
  log.phase = name;
  const Reference ref = regularize ? make_reference(state, data, config) : Reference{};
  Adam backbone_opt({config.lr_backbone, 0.9, 0.999, 1e-8, config.weight_decay});
  Adam head_opt({config.lr_new_head, 0.9, 0.999, 1e-8, config.weight_decay});
  const int epochs = state.completed == 0 ? config.first_task_epochs : config.epochs;
  const Index n = data.size();
  const TaskState& cstate = state;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto perm = permutation(n, state.rng);
    double loss_sum = 0.0;
    double reg_sum = 0.0;
    Index batches = 0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min(config.batch_size, n - start);
      const std::span<const Index> rows(perm.data() + start, static_cast<std::size_t>(len));
      const Matrix x = gather_rows(data.inputs, rows);
      const auto y = gather_labels(data.labels, rows);

      const ForwardCache cache = forward(state.model, state.head, x);
      const CrossEntropy ce = softmax_cross_entropy(cache.logits, y, ce_range);
      Matrix dfeatures = features_gradient(state.head, ce.dlogits);
      ExtractorGradients grads = ExtractorGradients::zeros_like(state.model);
      const double reg = regularize ? add_regularizer(cstate, config, ref, rows, cache.features, dfeatures, grads) : 0.0;
      grads += backward(state.model, cache, dfeatures);
      const Matrix dhead = head_gradient(cache.features, ce.dlogits);

      const double loss = ce.loss + reg;
      require_finite(loss, name, state.completed, epoch);
      backbone_opt.begin_step();
      apply_gradients(backbone_opt, state.model, grads);
      head_opt.begin_step();
      head_opt.update(0, column_block(state.head.weights, head_range), column_block(dhead, head_range));
      loss_sum += loss;
      reg_sum += reg;
      ++batches;
    }
    log.epoch_loss.push_back(loss_sum / double(std::max<Index>(batches, 1)));
    log.epoch_reg.push_back(reg_sum / double(std::max<Index>(batches, 1)));
  }
  if (!state.model.all_finite()) throw NumericalError(std::string(name) + ": parameters became non-finite");
  log.seconds = seconds_since(t0);
  return log;
}

// Class quotas for a batch drawn uniformly over `num_classes` classes:
// floor(B / m) each, remainder handed to randomly chosen distinct classes.
std::vector<Index> balanced_quotas(Index batch, Index num_classes, Rng& rng) {
  std::vector<Index> q(static_cast<std::size_t>(num_classes), batch / num_classes);
  const Index rem = batch % num_classes;
  const auto perm = permutation(num_classes, rng);
  for (Index r = 0; r < rem; ++r) ++q[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])];
  return q;
}

std::vector<std::vector<Index>> rows_by_class(const TaskData& data) {
  std::vector<std::vector<Index>> rows(static_cast<std::size_t>(data.num_classes()));
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    rows[static_cast<std::size_t>(data.labels[i] - data.class_begin)].push_back(static_cast<Index>(i));
  }
  return rows;
}

void finish_task(TaskState& state, const TaskData& data, const TrainConfig& config, TaskLog& log, bool with_prototypes,
                 bool with_efim) {
  const auto t0 = Clock::now();
  if (with_prototypes) {
    const auto ids = data.class_ids();
    for (auto& p : compute_class_stats(state.model, data.inputs, data.labels, ids, state.completed,
                                       config.diagonal_covariance)) {
      state.prototypes.add(std::move(p));
    }
  }
  state.efm = dataset_efm(state.model, state.head, data.inputs, state.completed);
  if (with_efim) state.efim = diag_efim_estimate(state.model, state.head, data.inputs);
  state.snapshot.emplace(state.model);
  ++state.completed;
  log.phases.push_back({"prototypes_and_efm", {}, {}, seconds_since(t0)});
}

PhaseLog drift_phase(TaskState& state, const TaskData& data, const TrainConfig& config, const Matrix& old_features) {
  const auto t0 = Clock::now();
  PhaseLog log{"drift_compensation", {}, {}, 0.0};
  if (config.update_prototypes && config.drift.enabled && !state.prototypes.empty() && state.efm) {
    const Matrix new_features = extract_features(state.model, data.inputs);
    state.prototypes = compensate_drift(state.prototypes, state.efm->matrix, old_features, new_features, config.drift);
  }
  log.seconds = seconds_since(t0);
  return log;
}

}  // namespace

void expand_for_task(TaskState& state, const TaskData& data) {
  if (data.class_begin != state.head.num_classes()) {
    throw std::invalid_argument("task labels start at " + std::to_string(data.class_begin) + " but the head has " +
                                std::to_string(state.head.num_classes()) + " columns");
  }
  if (data.num_classes() <= 0) throw std::invalid_argument("task has no classes");
  if (data.size() == 0) throw std::invalid_argument("task has no training samples");
  state.head = expand_head(state.head, data.num_classes(), state.rng);
}

PhaseLog train_backbone(TaskState& state, const TaskData& data, const TrainConfig& config) {
  const ClassRange current = state.head.last_task();
  if (current.end != state.head.num_classes() || current.begin != data.class_begin) {
    throw std::logic_error("train_backbone: head is not expanded for this task");
  }
  return backbone_loop(state, data, config, current, current, true, "backbone");
}

PhaseLog rebalance_classifier(TaskState& state, const TaskData& data, const TrainConfig& config) {
  const auto t0 = Clock::now();
  PhaseLog log{"rebalance", {}, {}, 0.0};
  if (state.completed == 0) {
    log.seconds = seconds_since(t0);
    return log;
  }
  if (state.prototypes.empty()) throw std::logic_error("rebalance_classifier: no prototypes after the first task");
  const Matrix features = extract_features(state.model, data.inputs);
  const auto by_class = rows_by_class(data);
  const auto old_ids = state.prototypes.class_ids();
  const Index seen = state.head.num_classes();
  if (static_cast<Index>(old_ids.size()) + data.num_classes() != seen) {
    throw std::logic_error("rebalance_classifier: prototypes do not cover the old classes");
  }
  Sgd opt({config.lr_rebalance, config.rebalance_momentum, 0.0});
  // One epoch visits as many samples as a class-balanced dataset of all seen classes.
  const double per_class = double(data.size()) / double(data.num_classes());
  const Index steps = std::max<Index>(1, Index(std::ceil(per_class * double(seen) / double(config.batch_size))));

  for (int epoch = 0; epoch < config.rebalance_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (Index s = 0; s < steps; ++s) {
      const auto quotas = balanced_quotas(config.batch_size, seen, state.rng);
      std::vector<std::pair<int, Index>> proto_quota;
      for (const int c : old_ids) proto_quota.emplace_back(c, quotas[static_cast<std::size_t>(c)]);
      LabeledFeatures pseudo = sample_pseudo_features(state.prototypes, proto_quota, state.rng);

      std::vector<Index> rows;
      std::vector<int> labels = pseudo.labels;
      for (int c = data.class_begin; c < data.class_end; ++c) {
        const auto& pool = by_class[static_cast<std::size_t>(c - data.class_begin)];
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (Index k = 0; k < quotas[static_cast<std::size_t>(c)]; ++k) {
          rows.push_back(pool[pick(state.rng)]);
          labels.push_back(c);
        }
      }
      Matrix batch(pseudo.features.rows() + static_cast<Index>(rows.size()), features.cols());
      batch.topRows(pseudo.features.rows()) = pseudo.features;
      batch.bottomRows(static_cast<Index>(rows.size())) = gather_rows(features, rows);

      const Matrix logits = compute_logits(state.head, batch);
      const CrossEntropy ce = softmax_cross_entropy(logits, labels, state.head.all_classes());
      require_finite(ce.loss, "rebalance", state.completed, epoch);
      const Matrix grad = head_gradient(batch, ce.dlogits);
      opt.begin_step();
      opt.update(0, flat(state.head.weights), flat(grad));
      loss_sum += ce.loss;
    }
    log.epoch_loss.push_back(loss_sum / double(steps));
  }
  log.seconds = seconds_since(t0);
  return log;
}

PrAceComposition prace_composition(std::span<const int> old_classes, int current_classes, Index batch_size, Rng& rng) {
  PrAceComposition out;
  const auto total = static_cast<int>(old_classes.size()) + current_classes;
  if (total <= 0) return out;
  std::uniform_int_distribution<int> pick(0, total - 1);
  std::vector<Index> counts(old_classes.size(), 0);
  for (Index s = 0; s < batch_size; ++s) {
    const int c = pick(rng);
    if (c < static_cast<int>(old_classes.size())) {
      ++counts[static_cast<std::size_t>(c)];
    } else {
      ++out.current;
    }
  }
  for (std::size_t i = 0; i < old_classes.size(); ++i) {
    if (counts[i] > 0) out.prototype_quotas.emplace_back(old_classes[i], counts[i]);
  }
  return out;
}

TaskLog run_task_efcpp(TaskState& state, const TaskData& data, const TrainConfig& config) {
  TaskLog log;
  log.task = state.completed;
  expand_for_task(state, data);
  const Matrix old_features = state.snapshot ? extract_features(state.snapshot->extractor(), data.inputs) : Matrix();
  log.phases.push_back(train_backbone(state, data, config));
  if (state.completed > 0) {
    log.phases.push_back(drift_phase(state, data, config, old_features));
    log.phases.push_back(rebalance_classifier(state, data, config));
  }
  finish_task(state, data, config, log, true, config.regularizer.kind == RegularizerKind::efim);
  return log;
}

TaskLog run_task_efc(TaskState& state, const TaskData& data, const TrainConfig& config) {
  if (state.completed == 0) return run_task_efcpp(state, data, config);
  TaskLog log;
  log.task = state.completed;
  expand_for_task(state, data);
  const auto t0 = Clock::now();
  PhaseLog phase{"backbone_prace", {}, {}, 0.0};

  const Matrix old_features = extract_features(state.snapshot->extractor(), data.inputs);
  if (!state.efm) throw std::logic_error("run_task_efc: missing previous EFM");
  Adam backbone_opt({config.lr_backbone, 0.9, 0.999, 1e-8, config.weight_decay});
  Adam head_opt({config.lr_new_head, 0.9, 0.999, 1e-8, config.weight_decay});
  const ClassRange current = state.head.last_task();
  const ClassRange all = state.head.all_classes();
  const auto old_ids = state.prototypes.class_ids();
  const Index n = data.size();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto perm = permutation(n, state.rng);
    const auto perm_hat = permutation(n, state.rng);
    double loss_sum = 0.0;
    double reg_sum = 0.0;
    Index batches = 0;
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index len = std::min(config.batch_size, n - start);
      const std::span<const Index> rows(perm.data() + start, static_cast<std::size_t>(len));
      const auto comp = prace_composition(old_ids, data.num_classes(), len, state.rng);
      const std::span<const Index> rows_hat(perm_hat.data() + start, static_cast<std::size_t>(comp.current));

      // One forward over X stacked on the current-data part of X̂.
      std::vector<Index> stacked(rows.begin(), rows.end());
      stacked.insert(stacked.end(), rows_hat.begin(), rows_hat.end());
      const Matrix x = gather_rows(data.inputs, stacked);
      const ForwardCache cache = forward(state.model, state.head, x);
      const auto y = gather_labels(data.labels, rows);
      const auto y_hat = gather_labels(data.labels, rows_hat);

      const CrossEntropy ce_cur = softmax_cross_entropy(cache.logits.topRows(len), y, current);
      LabeledFeatures pseudo = sample_pseudo_features(state.prototypes, comp.prototype_quotas, state.rng);
      Matrix mixed(pseudo.features.rows() + comp.current, cache.features.cols());
      mixed.topRows(pseudo.features.rows()) = pseudo.features;
      mixed.bottomRows(comp.current) = cache.features.bottomRows(comp.current);
      std::vector<int> mixed_labels = pseudo.labels;
      mixed_labels.insert(mixed_labels.end(), y_hat.begin(), y_hat.end());
      const CrossEntropy ce_all = softmax_cross_entropy(compute_logits(state.head, mixed), mixed_labels, all);

      const auto reg = efm_penalty(cache.features.topRows(len), gather_rows(old_features, rows), state.efm->matrix,
                                   config.regularizer);
      Matrix dfeatures = Matrix::Zero(cache.features.rows(), cache.features.cols());
      dfeatures.topRows(len) = features_gradient(state.head, ce_cur.dlogits) + reg.dfeatures;
      const Matrix dmixed = features_gradient(state.head, ce_all.dlogits);
      dfeatures.bottomRows(comp.current) += dmixed.bottomRows(comp.current);
      const Matrix dhead = head_gradient(cache.features.topRows(len), ce_cur.dlogits) + head_gradient(mixed, ce_all.dlogits);

      const double loss = ce_cur.loss + ce_all.loss + reg.loss;
      require_finite(loss, "backbone_prace", state.completed, epoch);
      backbone_opt.begin_step();
      apply_gradients(backbone_opt, state.model, backward(state.model, cache, dfeatures));
      head_opt.begin_step();
      head_opt.update(0, flat(state.head.weights), flat(dhead));
      loss_sum += loss;
      reg_sum += reg.loss;
      ++batches;
    }
    phase.epoch_loss.push_back(loss_sum / double(std::max<Index>(batches, 1)));
    phase.epoch_reg.push_back(reg_sum / double(std::max<Index>(batches, 1)));
  }
  if (!state.model.all_finite()) throw NumericalError("backbone_prace: parameters became non-finite");
  phase.seconds = seconds_since(t0);
  log.phases.push_back(std::move(phase));
  log.phases.push_back(drift_phase(state, data, config, old_features));
  finish_task(state, data, config, log, true, false);
  return log;
}

TaskLog run_task_finetune(TaskState& state, const TaskData& data, const TrainConfig& config) {
  TaskLog log;
  log.task = state.completed;
  expand_for_task(state, data);
  const ClassRange all = state.head.all_classes();
  log.phases.push_back(backbone_loop(state, data, config, all, all, false, "finetune"));
  state.snapshot.emplace(state.model);
  ++state.completed;
  return log;
}

TaskLog run_task(TaskState& state, const TaskData& data, const TrainConfig& config) {
  switch (config.strategy) {
    case Strategy::efcpp:
    case Strategy::reg_ablation: return run_task_efcpp(state, data, config);
    case Strategy::efc: return run_task_efc(state, data, config);
    case Strategy::finetune: return run_task_finetune(state, data, config);
  }
  throw std::logic_error("unhandled strategy");
}

std::vector<double> evaluate_tasks(const TaskState& state, const TaskStream& stream, std::size_t k) {
  std::vector<double> acc;
  for (std::size_t i = 0; i <= k; ++i) {
    const auto& test = stream.test[i];
    const Matrix logits = compute_logits(state.head, extract_features(state.model, test.inputs));
    acc.push_back(accuracy(logits, test.labels));
  }
  return acc;
}

StreamResult run_stream(const TaskStream& stream, const TrainConfig& config, StartMode mode,
                        const TaskObserver& observer) {
  config.validate();
  if (config.strategy == Strategy::efcpp && config.regularizer.kind != RegularizerKind::efm) {
    throw std::invalid_argument("strategy efcpp uses the efm regularizer; use reg_ablation to swap it");
  }
  TaskFeed feed(stream);
  StreamResult result{AccuracyMatrix(stream.class_counts, mode == StartMode::warm ? 0 : 1), {},
                      init_state(config, stream.input_dim), {}};
  TaskState& state = result.final_state;
  for (std::size_t t = 0; t < feed.num_tasks(); ++t) {
    const TaskData& data = feed.train(t);
    std::optional<FeatureExtractor> previous;
    if (observer && state.snapshot) previous = state.snapshot->extractor();
    result.logs.push_back(run_task(state, data, config));
    feed.advance();
    const auto acc = evaluate_tasks(state, stream, t);
    for (std::size_t i = 0; i <= t; ++i) result.accuracy.set(t, i, acc[i]);
    if (observer) observer(TaskEvent{t, previous ? &*previous : nullptr, state});
  }
  result.access_log = feed.access_log();
  return result;
}

}  // namespace efc
