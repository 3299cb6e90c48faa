#include "efc/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace efc {
namespace {

constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void require_step(const AccuracyMatrix& m, std::size_t k) {
  if (k >= m.num_tasks()) throw std::out_of_range("step " + std::to_string(k) + " beyond the stream");
  for (std::size_t i = 0; i <= k; ++i) {
    if (!m.has(k, i)) {
      throw std::invalid_argument("accuracy a[" + std::to_string(k) + "][" + std::to_string(i) + "] is missing");
    }
  }
}

}  // namespace

AccuracyMatrix::AccuracyMatrix(std::vector<int> class_counts, int start)
    : counts_(std::move(class_counts)), start_(start) {
  for (const int c : counts_) {
    if (c <= 0) throw std::invalid_argument("class counts must be positive");
  }
  rows_.resize(counts_.size());
  for (std::size_t k = 0; k < counts_.size(); ++k) rows_[k].assign(k + 1, kUnset);
}

void AccuracyMatrix::set(std::size_t k, std::size_t i, double accuracy) {
  if (k >= rows_.size() || i > k) throw std::out_of_range("accuracy entry outside the lower triangle");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw std::invalid_argument("accuracy must lie in [0, 1]");
  rows_[k][i] = accuracy;
}

double AccuracyMatrix::at(std::size_t k, std::size_t i) const {
  if (!has(k, i)) throw std::out_of_range("accuracy entry not set");
  return rows_[k][i];
}

bool AccuracyMatrix::has(std::size_t k, std::size_t i) const {
  return k < rows_.size() && i <= k && !std::isnan(rows_[k][i]);
}

long AccuracyMatrix::last_complete_step() const {
  long last = -1;
  for (std::size_t k = 0; k < rows_.size(); ++k) {
    if (std::all_of(rows_[k].begin(), rows_[k].end(), [](double v) { return !std::isnan(v); })) {
      last = static_cast<long>(k);
    } else {
      break;
    }
  }
  return last;
}

double per_step_accuracy(const AccuracyMatrix& m, std::size_t k) {
  require_step(m, k);
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    num += m.class_counts()[i] * m.at(k, i);
    den += m.class_counts()[i];
  }
  return num / den;
}

double avg_inc_accuracy(const AccuracyMatrix& m, std::size_t k) {
  double sum = 0.0;
  for (std::size_t j = 0; j <= k; ++j) sum += per_step_accuracy(m, j);
  return sum / double(k + 1);
}

double forgetting(const AccuracyMatrix& m, std::size_t k) {
  if (k == 0) throw std::invalid_argument("forgetting needs at least two tasks");
  for (std::size_t j = 0; j <= k; ++j) require_step(m, j);
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    double best = m.at(k, j);
    for (std::size_t i = j; i < k; ++i) best = std::max(best, m.at(i, j));
    sum += best - m.at(k, j);
  }
  return sum / double(k);
}

double plasticity(const AccuracyMatrix& m, std::size_t k) {
  double sum = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    if (!m.has(i, i)) throw std::invalid_argument("diagonal entry " + std::to_string(i) + " missing");
    sum += m.at(i, i);
  }
  return sum / double(k + 1);
}

MetricsReport compute_report(const AccuracyMatrix& m, std::size_t k) {
  MetricsReport r;
  r.a_step = per_step_accuracy(m, k);
  r.a_inc = avg_inc_accuracy(m, k);
  r.forgetting = k == 0 ? 0.0 : forgetting(m, k);
  r.plasticity = plasticity(m, k);
  return r;
}

MetricsReport compute_report(const AccuracyMatrix& m) {
  const long k = m.last_complete_step();
  if (k < 0) throw std::invalid_argument("accuracy matrix has no complete step");
  return compute_report(m, static_cast<std::size_t>(k));
}

MetricsCurves compute_curves(const AccuracyMatrix& m) {
  MetricsCurves c;
  const long last = m.last_complete_step();
  for (long k = 0; k <= last; ++k) {
    const auto r = compute_report(m, static_cast<std::size_t>(k));
    c.a_step.push_back(r.a_step);
    c.a_inc.push_back(r.a_inc);
    c.forgetting.push_back(r.forgetting);
    c.plasticity.push_back(r.plasticity);
  }
  return c;
}

void write_accuracy_csv(std::ostream& os, const AccuracyMatrix& m) {
  os << "# start=" << m.start() << "\n";
  os << "class_counts";
  for (const int c : m.class_counts()) os << ',' << c;
  os << "\n";
  os << "step";
  for (std::size_t i = 0; i < m.num_tasks(); ++i) os << ",task" << (i + static_cast<std::size_t>(m.start()));
  os << "\n";
  for (std::size_t k = 0; k < m.num_tasks(); ++k) {
    os << (k + static_cast<std::size_t>(m.start()));
    for (std::size_t i = 0; i < m.num_tasks(); ++i) {
      os << ',';
      if (m.has(k, i)) os << format_double(m.at(k, i));
    }
    os << "\n";
  }
}

AccuracyMatrix read_accuracy_csv(std::istream& is) {
  std::string line;
  auto next = [&]() {
    if (!std::getline(is, line)) throw std::runtime_error("accuracy csv: unexpected end of input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  auto fields = [](const std::string& s) {
    std::vector<std::string> out;
    std::string f;
    std::istringstream ss(s);
    while (std::getline(ss, f, ',')) out.push_back(f);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  const std::string first = next();
  if (first.rfind("# start=", 0) != 0) throw std::runtime_error("accuracy csv: missing start line");
  const int start = std::stoi(first.substr(8));
  auto counts_f = fields(next());
  if (counts_f.empty() || counts_f[0] != "class_counts") throw std::runtime_error("accuracy csv: missing class_counts");
  std::vector<int> counts;
  for (std::size_t j = 1; j < counts_f.size(); ++j) counts.push_back(std::stoi(counts_f[j]));
  AccuracyMatrix m(counts, start);
  next();  // column header
  for (std::size_t k = 0; k < counts.size(); ++k) {
    auto f = fields(next());
    if (f.size() != counts.size() + 1) throw std::runtime_error("accuracy csv: row " + std::to_string(k) + " has wrong width");
    for (std::size_t i = 0; i <= k; ++i) {
      if (!f[i + 1].empty()) m.set(k, i, std::strtod(f[i + 1].c_str(), nullptr));
    }
  }
  return m;
}

std::string report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["A_step"] = r.a_step;
  j["A_inc"] = r.a_inc;
  j["F"] = r.forgetting;
  j["PL"] = r.plasticity;
  return j.dump(2);
}

double accuracy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) throw DimensionError("accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const auto pred = predict(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return double(hit) / double(labels.size());
}

std::map<int, Vector> class_means(const Matrix& features, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != features.rows()) throw DimensionError("class_means: label count mismatch");
  std::map<int, Vector> sums;
  std::map<int, Index> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = sums.try_emplace(labels[i], Vector::Zero(features.cols()));
    it->second += features.row(static_cast<Index>(i)).transpose();
    ++counts[labels[i]];
  }
  for (auto& [c, s] : sums) s /= double(counts[c]);
  return sums;
}

DriftReport class_mean_drift(const FeatureExtractor& old_extractor, const FeatureExtractor& new_extractor,
                             const Matrix& efm, const std::map<int, Matrix>& inputs_by_class) {
  DriftReport report;
  if (inputs_by_class.empty()) throw std::invalid_argument("class_mean_drift: no classes");
  for (const auto& [c, x] : inputs_by_class) {
    if (x.rows() == 0) throw std::invalid_argument("class_mean_drift: class " + std::to_string(c) + " has no data");
    ClassDrift d;
    d.class_id = c;
    const Vector before = extract_features(old_extractor, x).colwise().mean().transpose();
    const Vector after = extract_features(new_extractor, x).colwise().mean().transpose();
    d.delta_mean = after - before;
    d.pseudo_norm = quadratic_form(efm, d.delta_mean);
    d.euclidean_sq = d.delta_mean.squaredNorm();
    report.average += d.pseudo_norm;
    report.classes.push_back(std::move(d));
  }
  report.average /= double(report.classes.size());
  return report;
}

std::vector<PrototypeGap> prototype_gap(const PrototypeStore& store, const std::map<int, Vector>& true_means,
                                        const Matrix& efm) {
  std::vector<PrototypeGap> out;
  for (const auto& [c, mu] : true_means) {
    const auto& p = store.at(c);
    const Vector d = p.mean - mu;
    out.push_back({c, d.norm(), std::sqrt(std::max(0.0, quadratic_form(efm, d)))});
  }
  return out;
}

}  // namespace efc
