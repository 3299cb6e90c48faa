#pragma once

// Task-loop orchestration: EFC++ (backbone training, prototype drift
// compensation, prototype re-balancing, prototype and EFM update), the EFC
// baseline with the asymmetric prototype cross-entropy, plain fine-tuning,
// and regularizer swaps inside the EFC++ loop.

#include "efc/efm.hpp"
#include "efc/model.hpp"
#include "efc/prototypes.hpp"
#include "efc/regularizers.hpp"
#include "efc/scenario.hpp"
#include "efc/metrics.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace efc {

enum class Strategy { efcpp, efc, finetune, reg_ablation };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

struct TrainConfig {
  Strategy strategy = Strategy::efcpp;
  int epochs = 100;
  int first_task_epochs = 100;
  int rebalance_epochs = 50;
  Index batch_size = 64;
  double lr_backbone = 1e-3;   // α₁
  double lr_new_head = 1e-3;   // α₂
  double lr_rebalance = 1e-2;  // α₃ (SGD)
  double rebalance_momentum = 0.0;
  double weight_decay = 2e-4;
  std::uint64_t seed = 1;
  bool update_prototypes = true;
  bool diagonal_covariance = false;
  Architecture architecture;
  RegularizerConfig regularizer;
  DriftCompensationConfig drift;

  void validate() const;
};

/// Everything carried from one task to the next.
struct TaskState {
  std::size_t completed = 0;  // number of finished tasks
  FeatureExtractor model;
  ClassifierHead head;
  std::optional<ModelSnapshot> snapshot;        // θ of the last finished task
  std::optional<EmpiricalFeatureMatrix> efm;    // E of the last finished task
  std::optional<DiagonalEFIM> efim;             // only for the E-FIM regularizer
  PrototypeStore prototypes;
  Rng rng;
};

TaskState init_state(const TrainConfig& config, Index input_dim);

struct PhaseLog {
  std::string phase;
  std::vector<double> epoch_loss;  // mean total loss per epoch
  std::vector<double> epoch_reg;   // mean regularizer loss per epoch (if any)
  double seconds = 0.0;
};

struct TaskLog {
  std::size_t task = 0;
  std::vector<PhaseLog> phases;
};

/// Expands the head for `data` and checks that labels continue the head.
void expand_for_task(TaskState& state, const TaskData& data);

/// CE on the current task columns plus the configured drift regularizer.
/// Only θ and the newest head block move; older head columns stay bit-exact.
PhaseLog train_backbone(TaskState& state, const TaskData& data, const TrainConfig& config);

/// Trains the full head on uniformly class-balanced batches mixing Gaussian
/// prototype samples with frozen current-task features. No-op without prototypes.
PhaseLog rebalance_classifier(TaskState& state, const TaskData& data, const TrainConfig& config);

/// Per-batch class composition of the prototype-side cross-entropy term:
/// each slot picks a class uniformly among all seen classes.
struct PrAceComposition {
  Index current = 0;
  std::vector<std::pair<int, Index>> prototype_quotas;
};
PrAceComposition prace_composition(std::span<const int> old_classes, int current_classes, Index batch_size, Rng& rng);

TaskLog run_task_efcpp(TaskState& state, const TaskData& data, const TrainConfig& config);
TaskLog run_task_efc(TaskState& state, const TaskData& data, const TrainConfig& config);
TaskLog run_task_finetune(TaskState& state, const TaskData& data, const TrainConfig& config);
TaskLog run_task(TaskState& state, const TaskData& data, const TrainConfig& config);

/// Harness hook, called after every task. `previous` is the backbone before
/// the task (null for the first). Observers see evaluation data only through
/// the stream they captured themselves; training code never receives it.
struct TaskEvent {
  std::size_t task;
  const FeatureExtractor* previous;
  const TaskState& state;
};
using TaskObserver = std::function<void(const TaskEvent&)>;

struct StreamResult {
  AccuracyMatrix accuracy;
  std::vector<TaskLog> logs;
  TaskState final_state;
  std::vector<TaskFeed::Access> access_log;
};

/// Runs the configured strategy over every task of the stream and evaluates
/// each seen task on its test split after every step.
StreamResult run_stream(const TaskStream& stream, const TrainConfig& config, StartMode mode,
                        const TaskObserver& observer = {});

/// Accuracy on every task i ≤ k with argmax over all seen classes.
std::vector<double> evaluate_tasks(const TaskState& state, const TaskStream& stream, std::size_t k);

}  // namespace efc
