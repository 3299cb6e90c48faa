#pragma once

// Experiment configuration and orchestration behind the command-line tool:
// flat key=value configs, seeded multi-run execution, artifact layout and
// the ablation / spectrum / drift / perturbation reports.

#include "efc/io.hpp"
#include "efc/metrics.hpp"
#include "efc/scenario.hpp"
#include "efc/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace efc {

struct ExperimentConfig {
  std::string name = "experiment";
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool save_checkpoints = false;

  std::string data_source = "synthetic";  // synthetic | csv
  std::string data_path;
  CsvOptions csv;
  SyntheticStreamSpec synthetic;
  SplitSpec split;
  std::uint64_t class_shuffle_seed = 0;

  TrainConfig train;

  std::vector<std::string> ablate_regularizers{"efm", "fd", "kd", "efim"};
  bool ablate_prototype_update = true;

  double perturb_sigma = -1.0;  // < 0: default scale from the spectrum
  double spectrum_rel_tol = 1e-8;

  void validate() const;
};

/// One documented config key.
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<ConfigKey>& config_keys();

/// Applies key=value pairs; unknown keys and malformed values throw.
void apply_config(ExperimentConfig& config, const std::map<std::string, std::string>& values);
/// Parses a flat key=value text (# comments, blank lines allowed).
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin = "config");
/// Every key with its resolved value, one `key=value` per line, in registry order.
std::string resolved_config_text(const ExperimentConfig& config);

/// Output root: $EFC_OUTPUT_ROOT when set, else config.output_dir.
std::filesystem::path output_root(const ExperimentConfig& config);

TaskStream build_stream(const ExperimentConfig& config);

struct SeedRun {
  std::uint64_t seed = 0;
  StreamResult result;
  MetricsReport report;
};

struct Aggregate {
  std::map<std::string, double> mean;
  std::map<std::string, double> stddev;  // sample standard deviation
};

Aggregate aggregate_reports(const std::vector<MetricsReport>& reports);

/// Runs the configured strategy for every seed. When `dir` is non-empty the
/// per-seed artifacts are written under it.
std::vector<SeedRun> run_seeds(const ExperimentConfig& config, const TaskStream& stream,
                               const std::filesystem::path& dir = {}, const TaskObserver& observer = {});

/// `run`: per-seed log.jsonl, accuracy_matrix.csv, metrics.json (and
/// checkpoints), plus aggregate.json and config_resolved.txt.
std::filesystem::path cmd_run(const ExperimentConfig& config);

/// `ablate`: ablation.csv (regularizer,F,PL,A_step) and prototype_update.csv.
std::filesystem::path cmd_ablate(const ExperimentConfig& config);

/// `spectrum`: spectrum.csv (task_index,eigen_index,eigenvalue) from the
/// per-task checkpoints of a seed directory.
std::filesystem::path cmd_spectrum(const std::filesystem::path& seed_dir, double rel_tol);

/// `drift`: drift.csv and prototype_gap.csv from per-task checkpoints, using the
/// held-out split rebuilt from the seed directory's resolved config.
std::filesystem::path cmd_drift(const std::filesystem::path& seed_dir);

/// `perturb`: perturb.csv for principal and non-principal modes at one checkpoint.
std::filesystem::path cmd_perturb(const std::filesystem::path& checkpoint_dir, const ExperimentConfig& config,
                                  double sigma);

/// Loads the resolved config stored next to a run.
ExperimentConfig load_config_file(const std::filesystem::path& path);

std::string task_log_json(const TaskLog& log, const AccuracyMatrix& acc, std::uint64_t seed);

}  // namespace efc
