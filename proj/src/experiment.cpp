#include "efc/experiment.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace efc {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(out)) {
    throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x < 0) throw std::invalid_argument(key + ": must be non-negative");
  return static_cast<std::uint64_t>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += f(xs[i]);
  }
  return out;
}


template <typename Get, typename Set>
ConfigKey key(std::string name, std::string help, Get get, Set set) {
  return {std::move(name), std::move(help), set, get};
}

std::vector<ConfigKey> make_keys() {
  using C = ExperimentConfig;
  std::vector<ConfigKey> k;
  auto real = [&](const char* name, const char* help, auto member_ref) {
    k.push_back(key(
        name, help, [member_ref](const C& c) { return fmt(member_ref(const_cast<C&>(c))); },
        [member_ref, name](C& c, const std::string& v) { member_ref(c) = to_double(name, v); }));
  };
  auto integer = [&](const char* name, const char* help, auto member_ref) {
    k.push_back(key(
        name, help, [member_ref](const C& c) { return std::to_string(member_ref(const_cast<C&>(c))); },
        [member_ref, name](C& c, const std::string& v) {
          using T = std::remove_reference_t<decltype(member_ref(c))>;
          member_ref(c) = static_cast<T>(to_int(name, v));
        }));
  };
  auto seed = [&](const char* name, const char* help, auto member_ref) {
    k.push_back(key(
        name, help, [member_ref](const C& c) { return std::to_string(member_ref(const_cast<C&>(c))); },
        [member_ref, name](C& c, const std::string& v) { member_ref(c) = to_u64(name, v); }));
  };
  auto boolean = [&](const char* name, const char* help, auto member_ref) {
    k.push_back(key(
        name, help, [member_ref](const C& c) { return std::string(member_ref(const_cast<C&>(c)) ? "true" : "false"); },
        [member_ref, name](C& c, const std::string& v) { member_ref(c) = to_bool(name, v); }));
  };
  auto text = [&](const char* name, const char* help, auto member_ref) {
    k.push_back(key(
        name, help, [member_ref](const C& c) { return member_ref(const_cast<C&>(c)); },
        [member_ref](C& c, const std::string& v) { member_ref(c) = v; }));
  };

  text("name", "experiment name (subdirectory of the output root)", [](C& c) -> std::string& { return c.name; });
  text("output_dir", "output root; $EFC_OUTPUT_ROOT overrides it", [](C& c) -> std::string& { return c.output_dir; });
  k.push_back(key(
      "seeds", "comma-separated training seeds",
      [](const C& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
      [](C& c, const std::string& v) {
        c.seeds.clear();
        for (const auto& s : to_list(v)) c.seeds.push_back(to_u64("seeds", s));
      }));
  boolean("save_checkpoints", "write a checkpoint after every task", [](C& c) -> bool& { return c.save_checkpoints; });

  text("data_source", "synthetic or csv", [](C& c) -> std::string& { return c.data_source; });
  text("data_path", "CSV file (label,f0,...) when data_source=csv", [](C& c) -> std::string& { return c.data_path; });
  real("test_fraction", "CSV rows per class held out for testing", [](C& c) -> double& { return c.csv.test_fraction; });
  seed("split_seed", "seed of the CSV train/test split", [](C& c) -> std::uint64_t& { return c.csv.split_seed; });
  k.push_back(key(
      "classes", "total number of classes (synthetic stream and split)",
      [](const C& c) { return std::to_string(c.split.total_classes); },
      [](C& c, const std::string& v) {
        const auto n = static_cast<int>(to_int("classes", v));
        c.split.total_classes = n;
        c.synthetic.classes = n;
      }));
  integer("input_dim", "synthetic input dimension", [](C& c) -> Index& { return c.synthetic.input_dim; });
  integer("train_per_class", "synthetic training samples per class", [](C& c) -> Index& { return c.synthetic.train_per_class; });
  integer("test_per_class", "synthetic test samples per class", [](C& c) -> Index& { return c.synthetic.test_per_class; });
  real("mean_scale", "std of synthetic cluster means", [](C& c) -> double& { return c.synthetic.mean_scale; });
  real("within_scale", "std of synthetic within-class noise", [](C& c) -> double& { return c.synthetic.within_scale; });
  integer("shared_dim", "if > 0, class means span a random subspace of this size", [](C& c) -> Index& { return c.synthetic.shared_dim; });
  real("nuisance_scale", "scale of class-independent correlated noise", [](C& c) -> double& { return c.synthetic.nuisance_scale; });
  seed("data_seed", "seed of the synthetic stream", [](C& c) -> std::uint64_t& { return c.synthetic.seed; });
  k.push_back(key(
      "standardize", "standardize inputs with first-task statistics",
      [](const C& c) { return std::string(c.synthetic.standardize ? "true" : "false"); },
      [](C& c, const std::string& v) { c.synthetic.standardize = c.csv.standardize = to_bool("standardize", v); }));

  k.push_back(key(
      "mode", "warm or cold start", [](const C& c) { return to_string(c.split.mode); },
      [](C& c, const std::string& v) { c.split.mode = parse_start_mode(v); }));
  integer("num_steps", "number of incremental steps K", [](C& c) -> int& { return c.split.num_steps; });
  integer("first_task_classes", "classes in the warm-start first task (0 for cold)", [](C& c) -> int& { return c.split.first_task_classes; });
  integer("per_step_classes", "classes per incremental step", [](C& c) -> int& { return c.split.per_step_classes; });
  seed("class_shuffle_seed", "class order permutation seed (0 keeps natural order)", [](C& c) -> std::uint64_t& { return c.class_shuffle_seed; });

  k.push_back(key(
      "strategy", "efcpp, efc, finetune or reg_ablation", [](const C& c) { return to_string(c.train.strategy); },
      [](C& c, const std::string& v) { c.train.strategy = parse_strategy(v); }));
  integer("epochs", "backbone epochs per incremental task", [](C& c) -> int& { return c.train.epochs; });
  integer("first_task_epochs", "epochs on the first task", [](C& c) -> int& { return c.train.first_task_epochs; });
  integer("rebalance_epochs", "prototype re-balancing epochs", [](C& c) -> int& { return c.train.rebalance_epochs; });
  integer("batch_size", "mini-batch size", [](C& c) -> Index& { return c.train.batch_size; });
  real("lr_backbone", "Adam learning rate of the backbone", [](C& c) -> double& { return c.train.lr_backbone; });
  real("lr_new_head", "Adam learning rate of the trained head block", [](C& c) -> double& { return c.train.lr_new_head; });
  real("lr_rebalance", "SGD learning rate of re-balancing", [](C& c) -> double& { return c.train.lr_rebalance; });
  real("rebalance_momentum", "SGD momentum of re-balancing", [](C& c) -> double& { return c.train.rebalance_momentum; });
  real("weight_decay", "L2 weight decay added to Adam gradients", [](C& c) -> double& { return c.train.weight_decay; });
  k.push_back(key(
      "hidden", "comma-separated hidden ReLU widths",
      [](const C& c) { return join(c.train.architecture.hidden, [](Index h) { return std::to_string(h); }); },
      [](C& c, const std::string& v) {
        c.train.architecture.hidden.clear();
        for (const auto& s : to_list(v)) c.train.architecture.hidden.push_back(static_cast<Index>(to_int("hidden", s)));
      }));
  integer("feature_dim", "feature dimension n", [](C& c) -> Index& { return c.train.architecture.feature_dim; });
  boolean("update_prototypes", "drift-compensate stored prototypes", [](C& c) -> bool& { return c.train.update_prototypes; });
  boolean("diagonal_covariance", "store only per-class variances", [](C& c) -> bool& { return c.train.diagonal_covariance; });
  real("drift_bandwidth_sq", "kernel width sigma^2 of drift compensation", [](C& c) -> double& { return c.train.drift.bandwidth_sq; });

  k.push_back(key(
      "regularizer", "efm, fd, kd, efim or none",
      [](const C& c) { return std::string(to_string(c.train.regularizer.kind)); },
      [](C& c, const std::string& v) { c.train.regularizer.kind = parse_regularizer(v); }));
  real("lambda_efm", "EFM penalty strength", [](C& c) -> double& { return c.train.regularizer.lambda_efm; });
  real("eta", "isotropic damping of the EFM penalty", [](C& c) -> double& { return c.train.regularizer.eta; });
  real("lambda_fd", "feature distillation strength", [](C& c) -> double& { return c.train.regularizer.lambda_fd; });
  boolean("fd_squared", "use mean squared instead of summed norm FD", [](C& c) -> bool& { return c.train.regularizer.fd_squared; });
  real("lambda_efim", "diagonal E-FIM (EWC) strength", [](C& c) -> double& { return c.train.regularizer.lambda_efim; });
  real("lambda_kd", "knowledge distillation strength", [](C& c) -> double& { return c.train.regularizer.lambda_kd; });
  real("kd_temperature", "knowledge distillation temperature", [](C& c) -> double& { return c.train.regularizer.kd_temperature; });

  k.push_back(key(
      "ablate_regularizers", "regularizers compared by `ablate`",
      [](const C& c) { return join(c.ablate_regularizers, [](const std::string& s) { return s; }); },
      [](C& c, const std::string& v) {
        c.ablate_regularizers = to_list(v);
        for (const auto& r : c.ablate_regularizers) parse_regularizer(r);
      }));
  boolean("ablate_prototype_update", "also compare prototype update on/off in `ablate`",
          [](C& c) -> bool& { return c.ablate_prototype_update; });
  real("perturb_sigma", "perturbation std for `perturb` (< 0: 0.5 sqrt(trace/rank))", [](C& c) -> double& { return c.perturb_sigma; });
  real("spectrum_rel_tol", "relative eigenvalue tolerance for ranks", [](C& c) -> double& { return c.spectrum_rel_tol; });
  return k;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw std::invalid_argument("seeds: at least one seed is required");
  if (data_source != "synthetic" && data_source != "csv") {
    throw std::invalid_argument("data_source must be 'synthetic' or 'csv'");
  }
  if (data_source == "csv") {
    if (data_path.empty()) throw std::invalid_argument("data_path is required when data_source=csv");
    if (!fs::exists(data_path)) throw std::invalid_argument("data_path '" + data_path + "' does not exist");
  } else {
    synthetic.validate();
  }
  split.validate();
  train.validate();
  if (name.empty() || name.find('/') != std::string::npos) throw std::invalid_argument("name must be a plain directory name");
  if (!(spectrum_rel_tol > 0)) throw std::invalid_argument("spectrum_rel_tol must be positive");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = make_keys();
  return keys;
}

void apply_config(ExperimentConfig& config, const std::map<std::string, std::string>& values) {
  for (const auto& [k, v] : values) {
    const auto& keys = config_keys();
    auto it = std::find_if(keys.begin(), keys.end(), [&](const ConfigKey& c) { return c.name == k; });
    if (it == keys.end()) throw std::invalid_argument("unknown config key '" + k + "'");
    it->set(config, v);
  }
}

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": expected key=value");
    }
    const std::string k = trim(line.substr(0, eq));
    if (k.empty()) throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": empty key");
    if (!out.emplace(k, trim(line.substr(eq + 1))).second) {
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": duplicate key '" + k + "'");
    }
  }
  return out;
}

std::string resolved_config_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + "=" + k.get(config) + "\n";
  return out;
}

ExperimentConfig load_config_file(const fs::path& path) {
  ExperimentConfig config;
  apply_config(config, parse_key_values(read_text_file(path), path.string()));
  return config;
}

fs::path output_root(const ExperimentConfig& config) {
  if (const char* env = std::getenv("EFC_OUTPUT_ROOT"); env && *env) return fs::path(env);
  return fs::path(config.output_dir);
}

TaskStream build_stream(const ExperimentConfig& config) {
  const auto splits = build_splits(config.split, config.class_shuffle_seed);
  if (config.data_source == "csv") return load_csv_dataset(config.data_path, splits, config.csv);
  SyntheticStreamSpec spec = config.synthetic;
  spec.classes = config.split.total_classes;
  return generate_synthetic_stream(spec, splits);
}

Aggregate aggregate_reports(const std::vector<MetricsReport>& reports) {
  Aggregate agg;
  if (reports.empty()) return agg;
  const std::vector<std::pair<std::string, double MetricsReport::*>> fields{
      {"A_step", &MetricsReport::a_step},
      {"A_inc", &MetricsReport::a_inc},
      {"F", &MetricsReport::forgetting},
      {"PL", &MetricsReport::plasticity}};
  const double n = double(reports.size());
  for (const auto& [name, member] : fields) {
    double mean = 0.0;
    for (const auto& r : reports) mean += r.*member;
    mean /= n;
    double ss = 0.0;
    for (const auto& r : reports) ss += (r.*member - mean) * (r.*member - mean);
    agg.mean[name] = mean;
    agg.stddev[name] = reports.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return agg;
}

std::string task_log_json(const TaskLog& log, const AccuracyMatrix& acc, std::uint64_t seed) {
  ordered_json j;
  j["seed"] = seed;
  j["task"] = log.task + static_cast<std::size_t>(acc.start());
  ordered_json phases = ordered_json::array();
  for (const auto& p : log.phases) {
    phases.push_back({{"phase", p.phase}, {"epoch_loss", p.epoch_loss}, {"epoch_reg", p.epoch_reg}, {"seconds", p.seconds}});
  }
  j["phases"] = phases;
  std::vector<double> row;
  for (std::size_t i = 0; i <= log.task; ++i) row.push_back(acc.at(log.task, i));
  j["accuracies"] = row;
  j["A_step"] = per_step_accuracy(acc, log.task);
  return j.dump();
}

namespace {

ordered_json report_object(const MetricsReport& r) {
  return {{"A_step", r.a_step}, {"A_inc", r.a_inc}, {"F", r.forgetting}, {"PL", r.plasticity}};
}

void write_seed_artifacts(const fs::path& dir, const ExperimentConfig& config, const SeedRun& run) {
  fs::create_directories(dir);
  std::string lines;
  for (const auto& log : run.result.logs) lines += task_log_json(log, run.result.accuracy, run.seed) + "\n";
  write_text_file(dir / "log.jsonl", lines);
  std::ostringstream csv;
  write_accuracy_csv(csv, run.result.accuracy);
  write_text_file(dir / "accuracy_matrix.csv", csv.str());
  const auto curves = compute_curves(run.result.accuracy);
  ordered_json j;
  j["seed"] = run.seed;
  j["strategy"] = to_string(config.train.strategy);
  j["regularizer"] = std::string(to_string(config.train.regularizer.kind));
  j["final"] = report_object(run.report);
  j["curves"] = {{"A_step", curves.a_step}, {"A_inc", curves.a_inc}, {"F", curves.forgetting}, {"PL", curves.plasticity}};
  write_text_file(dir / "metrics.json", j.dump(2) + "\n");
  write_text_file(dir / "config_resolved.txt", resolved_config_text(config));
}

fs::path seed_dir(const fs::path& root, std::uint64_t seed) { return root / ("seed_" + std::to_string(seed)); }

}  // namespace

std::vector<SeedRun> run_seeds(const ExperimentConfig& config, const TaskStream& stream, const fs::path& dir,
                               const TaskObserver& observer) {
  std::vector<SeedRun> runs;
  for (const auto s : config.seeds) {
    TrainConfig tc = config.train;
    tc.seed = s;
    TaskObserver obs = observer;
    if (!dir.empty() && config.save_checkpoints) {
      const fs::path ckpt = seed_dir(dir, s) / "checkpoints";
      obs = [ckpt, observer](const TaskEvent& e) {
        save_checkpoint(ckpt / ("task_" + std::to_string(e.task)), e.state);
        if (observer) observer(e);
      };
    }
    SeedRun run;
    run.seed = s;
    run.result = run_stream(stream, tc, config.split.mode, obs);
    run.report = compute_report(run.result.accuracy);
    if (!dir.empty()) write_seed_artifacts(seed_dir(dir, s), config, run);
    runs.push_back(std::move(run));
  }
  return runs;
}

fs::path cmd_run(const ExperimentConfig& config) {
  config.validate();
  const fs::path dir = output_root(config) / config.name;
  fs::create_directories(dir);
  write_text_file(dir / "config_resolved.txt", resolved_config_text(config));
  const TaskStream stream = build_stream(config);
  const auto runs = run_seeds(config, stream, dir);
  std::vector<MetricsReport> reports;
  ordered_json per_seed = ordered_json::array();
  for (const auto& r : runs) {
    reports.push_back(r.report);
    per_seed.push_back({{"seed", r.seed}, {"final", report_object(r.report)}});
  }
  const Aggregate agg = aggregate_reports(reports);
  ordered_json j;
  j["name"] = config.name;
  j["strategy"] = to_string(config.train.strategy);
  j["regularizer"] = std::string(to_string(config.train.regularizer.kind));
  j["seeds"] = config.seeds;
  j["mean"] = agg.mean;
  j["std"] = agg.stddev;
  j["per_seed"] = per_seed;
  write_text_file(dir / "aggregate.json", j.dump(2) + "\n");
  return dir;
}

fs::path cmd_ablate(const ExperimentConfig& config) {
  config.validate();
  const fs::path dir = output_root(config) / config.name;
  fs::create_directories(dir);
  write_text_file(dir / "config_resolved.txt", resolved_config_text(config));
  const TaskStream stream = build_stream(config);

  auto mean_report = [&](ExperimentConfig c, const std::string& tag) {
    std::vector<MetricsReport> reports;
    for (const auto& r : run_seeds(c, stream, dir / tag)) reports.push_back(r.report);
    return aggregate_reports(reports);
  };

  std::string table = "regularizer,F,PL,A_step\n";
  for (const auto& reg : config.ablate_regularizers) {
    ExperimentConfig c = config;
    c.train.strategy = Strategy::reg_ablation;
    c.train.regularizer.kind = parse_regularizer(reg);
    const auto agg = mean_report(c, "reg_" + reg);
    table += reg + "," + fmt(agg.mean.at("F")) + "," + fmt(agg.mean.at("PL")) + "," + fmt(agg.mean.at("A_step")) + "\n";
  }
  write_text_file(dir / "ablation.csv", table);

  if (config.ablate_prototype_update) {
    std::string upd = "prototype_update,A_step,A_inc,F,PL\n";
    for (const bool on : {true, false}) {
      ExperimentConfig c = config;
      c.train.strategy = Strategy::efcpp;
      c.train.regularizer.kind = RegularizerKind::efm;
      c.train.update_prototypes = on;
      const std::string tag = on ? "update" : "no_update";
      const auto agg = mean_report(c, "proto_" + tag);
      upd += tag + "," + fmt(agg.mean.at("A_step")) + "," + fmt(agg.mean.at("A_inc")) + "," + fmt(agg.mean.at("F")) +
             "," + fmt(agg.mean.at("PL")) + "\n";
    }
    write_text_file(dir / "prototype_update.csv", upd);
  }
  return dir;
}

namespace {

std::vector<fs::path> task_checkpoints(const fs::path& seed_dir) {
  const fs::path root = seed_dir / "checkpoints";
  if (!fs::is_directory(root)) throw std::runtime_error("no checkpoints under '" + seed_dir.string() + "' (run with save_checkpoints=true)");
  std::vector<fs::path> out;
  for (std::size_t t = 0;; ++t) {
    const fs::path p = root / ("task_" + std::to_string(t));
    if (!fs::exists(p / "checkpoint.json")) break;
    out.push_back(p);
  }
  if (out.empty()) throw std::runtime_error("no checkpoints under '" + root.string() + "'");
  return out;
}

}  // namespace

fs::path cmd_spectrum(const fs::path& seed_dir, double rel_tol) {
  std::string csv = "task_index,eigen_index,eigenvalue,rank\n";
  for (const auto& p : task_checkpoints(seed_dir)) {
    const TaskState s = load_checkpoint(p);
    if (!s.efm) throw std::runtime_error("checkpoint '" + p.string() + "' has no EFM");
    const Spectrum sp = spectrum_analysis(s.efm->matrix, rel_tol);
    for (Index i = 0; i < sp.eigenvalues.size(); ++i) {
      csv += std::to_string(s.efm->task_index) + "," + std::to_string(i) + "," + fmt(sp.eigenvalues[i]) + "," +
             std::to_string(sp.rank) + "\n";
    }
  }
  const fs::path out = seed_dir / "spectrum.csv";
  write_text_file(out, csv);
  return out;
}

fs::path cmd_drift(const fs::path& seed_dir) {
  const auto ckpts = task_checkpoints(seed_dir);
  const ExperimentConfig config = load_config_file(seed_dir / "config_resolved.txt");
  const TaskStream stream = build_stream(config);
  std::string drift = "task_index,class_id,pseudo_norm,euclidean_sq\n";
  std::string summary = "task_index,delta\n";
  std::string gap = "task_index,class_id,euclidean,pseudo\n";
  for (std::size_t t = 1; t < ckpts.size(); ++t) {
    const TaskState before = load_checkpoint(ckpts[t - 1]);
    const TaskState after = load_checkpoint(ckpts[t]);
    if (!after.efm) throw std::runtime_error("checkpoint '" + ckpts[t].string() + "' has no EFM");
    const auto& test = stream.test.at(t);
    std::map<int, Matrix> by_class;
    for (const int c : test.class_ids()) {
      std::vector<Index> rows;
      for (std::size_t i = 0; i < test.labels.size(); ++i) {
        if (test.labels[i] == c) rows.push_back(static_cast<Index>(i));
      }
      Matrix x(static_cast<Index>(rows.size()), test.inputs.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Index>(r)) = test.inputs.row(rows[r]);
      by_class.emplace(c, std::move(x));
    }
    const DriftReport rep = class_mean_drift(before.model, after.model, after.efm->matrix, by_class);
    for (const auto& d : rep.classes) {
      drift += std::to_string(t) + "," + std::to_string(d.class_id) + "," + fmt(d.pseudo_norm) + "," + fmt(d.euclidean_sq) + "\n";
    }
    summary += std::to_string(t) + "," + fmt(rep.average) + "\n";

    std::map<int, Vector> truth;
    for (std::size_t i = 0; i < t; ++i) {
      const auto& old = stream.test[i];
      for (auto& [c, mu] : class_means(extract_features(after.model, old.inputs), old.labels)) truth.emplace(c, mu);
    }
    for (const auto& g : prototype_gap(after.prototypes, truth, after.efm->matrix)) {
      gap += std::to_string(t) + "," + std::to_string(g.class_id) + "," + fmt(g.euclidean) + "," + fmt(g.pseudo) + "\n";
    }
  }
  write_text_file(seed_dir / "drift.csv", drift);
  write_text_file(seed_dir / "drift_summary.csv", summary);
  write_text_file(seed_dir / "prototype_gap.csv", gap);
  return seed_dir / "drift.csv";
}

fs::path cmd_perturb(const fs::path& checkpoint_dir, const ExperimentConfig& config, double sigma) {
  const TaskState state = load_checkpoint(checkpoint_dir);
  if (!state.efm) throw std::runtime_error("checkpoint '" + checkpoint_dir.string() + "' has no EFM");
  const TaskStream stream = build_stream(config);
  const Index seen = state.head.num_classes();
  Matrix inputs(0, stream.input_dim);
  std::vector<int> labels;
  for (const auto& t : stream.test) {
    if (t.class_end > seen) break;
    Matrix grown(inputs.rows() + t.inputs.rows(), inputs.cols());
    grown << inputs, t.inputs;
    inputs = std::move(grown);
    labels.insert(labels.end(), t.labels.begin(), t.labels.end());
  }
  const Spectrum sp = spectrum_analysis(state.efm->matrix, config.spectrum_rel_tol);
  const double s = sigma >= 0 ? sigma : default_perturbation_scale(sp);
  std::string csv = "mode,sigma,rank,mean_abs_deviation,max_abs_deviation,accuracy_clean,accuracy_perturbed\n";
  for (const auto mode : {PerturbationMode::principal, PerturbationMode::non_principal}) {
    if (mode == PerturbationMode::principal && sp.rank == 0) continue;
    Rng rng(config.seeds.front());
    const auto r = perturbation_report(state.model, state.head, sp, inputs, labels, s, mode, rng);
    csv += std::string(mode == PerturbationMode::principal ? "principal" : "non_principal") + "," + fmt(r.sigma) + "," +
           std::to_string(r.rank) + "," + fmt(r.mean_abs_deviation) + "," + fmt(r.max_abs_deviation) + "," +
           fmt(r.accuracy_clean) + "," + fmt(r.accuracy_perturbed) + "\n";
  }
  const fs::path out = checkpoint_dir / "perturb.csv";
  write_text_file(out, csv);
  return out;
}

}  // namespace efc
