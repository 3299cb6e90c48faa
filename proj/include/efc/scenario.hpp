#pragma once

// Task streams: Warm/Cold Start class splits, the synthetic Gaussian stream
// used for desk-scale experiments, CSV ingestion, and the TaskFeed that
// enforces the exemplar-free contract.
//
// Labels inside a TaskStream are incremental class indices: the position of
// the class in the concatenated split order. Task t therefore owns the
// contiguous label block that its head columns will occupy.

#include "efc/linalg.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace efc {

enum class StartMode { warm, cold };

std::string to_string(StartMode mode);
StartMode parse_start_mode(const std::string& name);

struct SplitSpec {
  int total_classes = 50;
  int first_task_classes = 0;  // |C0|; must be 0 in cold mode
  int per_step_classes = 5;
  int num_steps = 10;          // K
  StartMode mode = StartMode::cold;

  /// Cold: K tasks. Warm: 1 + K tasks.
  int num_tasks() const { return mode == StartMode::warm ? num_steps + 1 : num_steps; }
  void validate() const;
};

/// Ordered original class ids per task. Seed 0 keeps the natural order;
/// any other seed applies a seeded permutation before splitting.
std::vector<std::vector<int>> build_splits(const SplitSpec& spec, std::uint64_t class_shuffle_seed);

struct TaskData {
  Matrix inputs;               // samples x input_dim
  std::vector<int> labels;     // incremental class indices
  int class_begin = 0;         // labels lie in [class_begin, class_end)
  int class_end = 0;

  Index size() const { return inputs.rows(); }
  int num_classes() const { return class_end - class_begin; }
  std::vector<int> class_ids() const;
};

struct TaskStream {
  std::vector<TaskData> train;
  std::vector<TaskData> test;
  std::vector<std::vector<int>> class_order;  // original class ids per task
  std::vector<int> class_counts;              // |C_t| per task
  Index input_dim = 0;

  std::size_t num_tasks() const { return train.size(); }
  int total_classes() const;
};

struct SyntheticStreamSpec {
  int classes = 50;
  Index input_dim = 64;
  Index train_per_class = 200;
  Index test_per_class = 100;
  double mean_scale = 1.5;         // cluster means ~ N(0, mean_scale² I)
  double within_scale = 1.0;       // within-class covariance within_scale² I
  Index shared_dim = 8;            // >0: means live in a shared random subspace of this dimension
  double nuisance_scale = 0.0;     // extra per-class anisotropic noise along random directions
  std::uint64_t seed = 7;
  bool standardize = true;

  void validate() const;
};

/// One Gaussian cluster per class; train and test drawn independently.
TaskStream generate_synthetic_stream(const SyntheticStreamSpec& spec,
                                     const std::vector<std::vector<int>>& splits);

struct CsvOptions {
  double test_fraction = 0.2;
  std::uint64_t split_seed = 1;
  bool standardize = true;
};

/// Strict CSV reader: header `label,f0,...,f{D-1}`, integer labels, finite reals.
/// Every class of the splits must have at least two train rows.
TaskStream load_csv_dataset(const std::string& path, const std::vector<std::vector<int>>& splits,
                            const CsvOptions& options = {});

/// Standardizes every task in place with per-feature statistics of the first
/// task's training data.
void standardize_by_first_task(TaskStream& stream);

class ExemplarAccessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Sequential view of the training split. Only the current task is readable;
/// advance() drops it for good.
class TaskFeed {
 public:
  struct Access {
    std::size_t requested;
    std::size_t current;
  };

  explicit TaskFeed(const TaskStream& stream);

  std::size_t num_tasks() const { return tasks_.size(); }
  std::size_t current() const { return current_; }
  bool done() const { return current_ >= tasks_.size(); }
  const TaskData& train(std::size_t task);
  void advance();
  const std::vector<Access>& access_log() const { return log_; }

 private:
  std::vector<std::optional<TaskData>> tasks_;
  std::size_t current_ = 0;
  std::vector<Access> log_;
};

}  // namespace efc
