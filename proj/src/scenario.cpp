#include "efc/scenario.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace efc {

std::string to_string(StartMode mode) { return mode == StartMode::warm ? "warm" : "cold"; }

StartMode parse_start_mode(const std::string& name) {
  if (name == "warm") return StartMode::warm;
  if (name == "cold") return StartMode::cold;
  throw std::invalid_argument("mode must be 'warm' or 'cold', got '" + name + "'");
}

void SplitSpec::validate() const {
  if (total_classes <= 0 || per_step_classes <= 0 || num_steps <= 0) {
    throw std::invalid_argument("split: total_classes, per_step_classes and num_steps must be positive");
  }
  if (mode == StartMode::cold && first_task_classes != 0) {
    throw std::invalid_argument("split: cold start requires first_task_classes = 0");
  }
  if (mode == StartMode::warm && first_task_classes <= 0) {
    throw std::invalid_argument("split: warm start requires first_task_classes > 0");
  }
  if (first_task_classes + num_steps * per_step_classes != total_classes) {
    throw std::invalid_argument("split: first_task_classes + num_steps * per_step_classes (" +
                                std::to_string(first_task_classes + num_steps * per_step_classes) +
                                ") != total_classes (" + std::to_string(total_classes) + ")");
  }
}

std::vector<std::vector<int>> build_splits(const SplitSpec& spec, std::uint64_t class_shuffle_seed) {
  spec.validate();
  std::vector<int> order(static_cast<std::size_t>(spec.total_classes));
  std::iota(order.begin(), order.end(), 0);
  if (class_shuffle_seed != 0) {
    Rng rng(class_shuffle_seed);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
  }
  std::vector<std::vector<int>> splits;
  auto it = order.begin();
  if (spec.mode == StartMode::warm) {
    splits.emplace_back(it, it + spec.first_task_classes);
    it += spec.first_task_classes;
  }
  for (int k = 0; k < spec.num_steps; ++k) {
    splits.emplace_back(it, it + spec.per_step_classes);
    it += spec.per_step_classes;
  }
  return splits;
}

std::vector<int> TaskData::class_ids() const {
  std::vector<int> ids(static_cast<std::size_t>(num_classes()));
  std::iota(ids.begin(), ids.end(), class_begin);
  return ids;
}

int TaskStream::total_classes() const {
  return std::accumulate(class_counts.begin(), class_counts.end(), 0);
}

void SyntheticStreamSpec::validate() const {
  if (classes <= 0 || input_dim <= 0 || train_per_class < 2 || test_per_class < 1) {
    throw std::invalid_argument("synthetic stream: classes, input_dim must be positive, train_per_class >= 2");
  }
  if (mean_scale < 0 || within_scale < 0 || nuisance_scale < 0) {
    throw std::invalid_argument("synthetic stream: scales must be non-negative");
  }
  if (shared_dim < 0 || shared_dim > input_dim) {
    throw std::invalid_argument("synthetic stream: shared_dim must lie in [0, input_dim]");
  }
}

namespace {

void check_splits(const std::vector<std::vector<int>>& splits, int total_classes) {
  std::set<int> seen;
  for (const auto& task : splits) {
    if (task.empty()) throw std::invalid_argument("split contains an empty task");
    for (const int c : task) {
      if (c < 0 || c >= total_classes) {
        throw std::invalid_argument("split references class " + std::to_string(c) + " outside [0, " +
                                    std::to_string(total_classes) + ")");
      }
      if (!seen.insert(c).second) throw std::invalid_argument("class " + std::to_string(c) + " appears in two tasks");
    }
  }
}

Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) z(i, j) = normal(rng);
  }
  return z;
}

// Routes per-class sample blocks into tasks with incremental labels.
TaskStream assemble(const std::vector<std::vector<int>>& splits, const std::vector<Matrix>& train_by_class,
                    const std::vector<Matrix>& test_by_class, Index input_dim) {
  TaskStream stream;
  stream.class_order = splits;
  stream.input_dim = input_dim;
  int next_label = 0;
  for (const auto& task : splits) {
    TaskData tr;
    TaskData te;
    tr.class_begin = te.class_begin = next_label;
    Index ntr = 0;
    Index nte = 0;
    for (const int c : task) {
      ntr += train_by_class[static_cast<std::size_t>(c)].rows();
      nte += test_by_class[static_cast<std::size_t>(c)].rows();
    }
    tr.inputs.resize(ntr, input_dim);
    te.inputs.resize(nte, input_dim);
    Index rtr = 0;
    Index rte = 0;
    for (const int c : task) {
      const Matrix& a = train_by_class[static_cast<std::size_t>(c)];
      const Matrix& b = test_by_class[static_cast<std::size_t>(c)];
      tr.inputs.middleRows(rtr, a.rows()) = a;
      te.inputs.middleRows(rte, b.rows()) = b;
      tr.labels.insert(tr.labels.end(), static_cast<std::size_t>(a.rows()), next_label);
      te.labels.insert(te.labels.end(), static_cast<std::size_t>(b.rows()), next_label);
      rtr += a.rows();
      rte += b.rows();
      ++next_label;
    }
    tr.class_end = te.class_end = next_label;
    stream.class_counts.push_back(static_cast<int>(task.size()));
    stream.train.push_back(std::move(tr));
    stream.test.push_back(std::move(te));
  }
  return stream;
}

}  // namespace

TaskStream generate_synthetic_stream(const SyntheticStreamSpec& spec, const std::vector<std::vector<int>>& splits) {
  spec.validate();
  check_splits(splits, spec.classes);
  Rng rng(spec.seed);
  const Index d = spec.input_dim;

  Matrix means;
  if (spec.shared_dim > 0) {
    const Matrix g = standard_normal(d, spec.shared_dim, rng);
    const Matrix basis = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(d, spec.shared_dim);
    means = spec.mean_scale * standard_normal(spec.classes, spec.shared_dim, rng) * basis.transpose();
  } else {
    means = spec.mean_scale * standard_normal(spec.classes, d, rng);
  }
  // Nuisance mixing is shared by all classes so it carries no label information.
  const Matrix mixing = spec.nuisance_scale > 0 ? Matrix(standard_normal(d, d, rng) / std::sqrt(double(d)))
                                                : Matrix::Zero(d, d);

  auto draw = [&](int c, Index count) {
    Matrix x = spec.within_scale * standard_normal(count, d, rng);
    if (spec.nuisance_scale > 0) x += spec.nuisance_scale * standard_normal(count, d, rng) * mixing.transpose();
    x.rowwise() += means.row(c);
    return x;
  };
  std::vector<Matrix> train(static_cast<std::size_t>(spec.classes));
  std::vector<Matrix> test(static_cast<std::size_t>(spec.classes));
  for (int c = 0; c < spec.classes; ++c) train[static_cast<std::size_t>(c)] = draw(c, spec.train_per_class);
  for (int c = 0; c < spec.classes; ++c) test[static_cast<std::size_t>(c)] = draw(c, spec.test_per_class);

  // Classes absent from the split are generated (to keep draws split-independent) but dropped.
  TaskStream stream = assemble(splits, train, test, d);
  if (spec.standardize) standardize_by_first_task(stream);
  return stream;
}

void standardize_by_first_task(TaskStream& stream) {
  if (stream.train.empty() || stream.train.front().size() == 0) return;
  const Matrix& ref = stream.train.front().inputs;
  const Eigen::RowVectorXd mean = ref.colwise().mean();
  Eigen::RowVectorXd sd = ((ref.rowwise() - mean).cwiseAbs2().colwise().sum() / double(ref.rows())).cwiseSqrt();
  for (Index j = 0; j < sd.size(); ++j) {
    if (!(sd[j] > 1e-12)) sd[j] = 1.0;
  }
  auto apply = [&](Matrix& x) { x = (x.rowwise() - mean).array().rowwise() / sd.array(); };
  for (auto& t : stream.train) apply(t.inputs);
  for (auto& t : stream.test) apply(t.inputs);
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

TaskStream load_csv_dataset(const std::string& path, const std::vector<std::vector<int>>& splits,
                            const CsvOptions& options) {
  if (!(options.test_fraction >= 0.0 && options.test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in [0, 1)");
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  const auto header = split_fields(strip_cr(line));
  if (header.size() < 2 || header[0] != "label") {
    throw std::runtime_error(path + ":1: header must be 'label,f0,f1,...'");
  }
  for (std::size_t j = 1; j < header.size(); ++j) {
    if (header[j] != "f" + std::to_string(j - 1)) {
      throw std::runtime_error(path + ":1: expected column 'f" + std::to_string(j - 1) + "', got '" + header[j] + "'");
    }
  }
  const Index dim = static_cast<Index>(header.size() - 1);

  std::map<int, std::vector<std::vector<double>>> rows_by_class;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    const std::string where = path + ":" + std::to_string(line_no);
    if (line.empty()) throw std::runtime_error(where + ": empty line");
    if (line.rfind("label,", 0) == 0) throw std::runtime_error(where + ": duplicate header");
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()));
    }
    int label = 0;
    {
      const auto& f = fields[0];
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), label);
      if (ec != std::errc() || p != f.data() + f.size()) throw std::runtime_error(where + ": bad label '" + f + "'");
    }
    std::vector<double> values(static_cast<std::size_t>(dim));
    for (Index j = 0; j < dim; ++j) {
      const auto& f = fields[static_cast<std::size_t>(j + 1)];
      double v = 0.0;
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || p != f.data() + f.size() || !std::isfinite(v)) {
        throw std::runtime_error(where + ": bad value '" + f + "' in column f" + std::to_string(j));
      }
      values[static_cast<std::size_t>(j)] = v;
    }
    rows_by_class[label].push_back(std::move(values));
  }
  if (rows_by_class.empty()) throw std::runtime_error(path + ": no data rows");

  int max_class = 0;
  std::set<int> wanted;
  for (const auto& task : splits) {
    for (const int c : task) {
      wanted.insert(c);
      max_class = std::max(max_class, c);
    }
  }
  for (const auto& [label, _] : rows_by_class) {
    if (!wanted.count(label)) throw std::runtime_error(path + ": label " + std::to_string(label) + " is not in any task");
  }
  check_splits(splits, max_class + 1);

  std::vector<Matrix> train(static_cast<std::size_t>(max_class + 1));
  std::vector<Matrix> test(static_cast<std::size_t>(max_class + 1));
  Rng rng(options.split_seed);
  for (const int c : wanted) {
    auto it = rows_by_class.find(c);
    if (it == rows_by_class.end()) throw std::runtime_error(path + ": class " + std::to_string(c) + " has no rows");
    auto& rows = it->second;
    std::vector<std::size_t> perm(rows.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(perm[i - 1], perm[pick(rng)]);
    }
    const auto n_test = static_cast<std::size_t>(std::floor(options.test_fraction * double(rows.size())));
    const std::size_t n_train = rows.size() - n_test;
    if (n_train < 2) throw std::runtime_error(path + ": class " + std::to_string(c) + " has fewer than 2 train rows");
    auto fill = [&](Matrix& m, std::size_t from, std::size_t count) {
      m.resize(static_cast<Index>(count), dim);
      for (std::size_t r = 0; r < count; ++r) {
        const auto& src = rows[perm[from + r]];
        for (Index j = 0; j < dim; ++j) m(static_cast<Index>(r), j) = src[static_cast<std::size_t>(j)];
      }
    };
    fill(train[static_cast<std::size_t>(c)], 0, n_train);
    fill(test[static_cast<std::size_t>(c)], n_train, n_test);
  }
  TaskStream stream = assemble(splits, train, test, dim);
  if (options.standardize) standardize_by_first_task(stream);
  return stream;
}

TaskFeed::TaskFeed(const TaskStream& stream) {
  for (const auto& t : stream.train) tasks_.emplace_back(t);
}

const TaskData& TaskFeed::train(std::size_t task) {
  log_.push_back({task, current_});
  if (task >= tasks_.size()) throw std::out_of_range("task " + std::to_string(task) + " does not exist");
  if (task < current_ || !tasks_[task]) {
    throw ExemplarAccessError("task " + std::to_string(task) + " training data was released after completion");
  }
  if (task > current_) throw ExemplarAccessError("task " + std::to_string(task) + " is not available yet");
  return *tasks_[task];
}

void TaskFeed::advance() {
  if (done()) throw std::logic_error("TaskFeed::advance past the last task");
  tasks_[current_].reset();
  ++current_;
}

}  // namespace efc
