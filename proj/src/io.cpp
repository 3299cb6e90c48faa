#include "efc/io.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace efc {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

ordered_json read_json(const fs::path& path) {
  try {
    return ordered_json::parse(read_text_file(path));
  } catch (const ordered_json::exception& e) {
    throw std::runtime_error("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace

void save_prototypes(const fs::path& dir, const PrototypeStore& store) {
  fs::create_directories(dir);
  ordered_json index = ordered_json::array();
  for (const auto& [id, p] : store.entries()) {
    const std::string stem = "class_" + std::to_string(id);
    save_matrix((dir / (stem + "_mean.efmm")).string(), p.mean);
    save_matrix((dir / (stem + "_cov.efmm")).string(), p.covariance);
    index.push_back({{"class_id", id},
                     {"origin_task", p.origin_task},
                     {"diagonal", p.diagonal},
                     {"mean", stem + "_mean.efmm"},
                     {"covariance", stem + "_cov.efmm"}});
  }
  write_text_file(dir / "index.json", ordered_json{{"prototypes", index}}.dump(2) + "\n");
}

PrototypeStore load_prototypes(const fs::path& dir) {
  const auto index = read_json(dir / "index.json");
  PrototypeStore store;
  for (const auto& e : index.at("prototypes")) {
    Matrix mean = load_matrix((dir / e.at("mean").get<std::string>()).string());
    if (mean.cols() != 1) throw std::runtime_error("prototype mean must be a column vector");
    store.add(make_prototype(e.at("class_id").get<int>(), Vector(mean.col(0)),
                             load_matrix((dir / e.at("covariance").get<std::string>()).string()),
                             e.at("origin_task").get<std::size_t>(), e.at("diagonal").get<bool>()));
  }
  return store;
}

void save_checkpoint(const fs::path& dir, const TaskState& state) {
  fs::create_directories(dir);
  ordered_json layers = ordered_json::array();
  for (std::size_t l = 0; l < state.model.layers.size(); ++l) {
    const auto& layer = state.model.layers[l];
    const std::string w = "layer" + std::to_string(l) + "_weight.efmm";
    const std::string b = "layer" + std::to_string(l) + "_bias.efmm";
    save_matrix((dir / w).string(), layer.weight);
    save_matrix((dir / b).string(), layer.bias);
    layers.push_back({{"in", layer.in_dim()},
                      {"out", layer.out_dim()},
                      {"activation", layer.activation == Activation::relu ? "relu" : "identity"},
                      {"weight", w},
                      {"bias", b}});
  }
  save_matrix((dir / "head.efmm").string(), state.head.weights);
  ordered_json ranges = ordered_json::array();
  for (const auto& r : state.head.task_ranges) ranges.push_back({r.begin, r.end});

  ordered_json j;
  j["format"] = "efcpp-checkpoint-1";
  j["completed_tasks"] = state.completed;
  j["input_dim"] = state.model.input_dim();
  j["feature_dim"] = state.model.feature_dim();
  j["num_classes"] = state.head.num_classes();
  j["layers"] = layers;
  j["head"] = "head.efmm";
  j["task_ranges"] = ranges;
  if (state.efm) {
    save_matrix((dir / "efm.efmm").string(), state.efm->matrix);
    j["efm"] = {{"file", "efm.efmm"},
                {"task_index", state.efm->task_index},
                {"num_classes", state.efm->num_classes},
                {"sample_count", state.efm->sample_count}};
  }
  if (!state.prototypes.empty()) {
    save_prototypes(dir / "prototypes", state.prototypes);
    j["prototypes"] = "prototypes";
  }
  write_text_file(dir / "checkpoint.json", j.dump(2) + "\n");
}

TaskState load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "checkpoint.json")) {
    throw std::runtime_error("no checkpoint at '" + dir.string() + "'");
  }
  const auto j = read_json(dir / "checkpoint.json");
  TaskState state;
  state.completed = j.at("completed_tasks").get<std::size_t>();
  for (const auto& e : j.at("layers")) {
    DenseLayer layer;
    layer.weight = load_matrix((dir / e.at("weight").get<std::string>()).string());
    const Matrix bias = load_matrix((dir / e.at("bias").get<std::string>()).string());
    layer.bias = bias.col(0);
    layer.activation = e.at("activation").get<std::string>() == "relu" ? Activation::relu : Activation::identity;
    if (layer.weight.rows() != e.at("in").get<Index>() || layer.weight.cols() != e.at("out").get<Index>() ||
        layer.bias.size() != layer.weight.cols()) {
      throw std::runtime_error("checkpoint layer shape does not match its header");
    }
    state.model.layers.push_back(std::move(layer));
  }
  state.head.weights = load_matrix((dir / j.at("head").get<std::string>()).string());
  for (const auto& r : j.at("task_ranges")) state.head.task_ranges.push_back({r.at(0).get<Index>(), r.at(1).get<Index>()});
  if (state.head.feature_dim() != state.model.feature_dim()) throw std::runtime_error("checkpoint head/model width mismatch");
  if (j.contains("efm")) {
    const auto& e = j.at("efm");
    EmpiricalFeatureMatrix efm;
    efm.matrix = load_matrix((dir / e.at("file").get<std::string>()).string());
    efm.task_index = e.at("task_index").get<std::size_t>();
    efm.num_classes = e.at("num_classes").get<Index>();
    efm.sample_count = e.at("sample_count").get<std::size_t>();
    state.efm = std::move(efm);
  }
  if (j.contains("prototypes")) state.prototypes = load_prototypes(dir / j.at("prototypes").get<std::string>());
  state.snapshot.emplace(state.model);
  return state;
}

}  // namespace efc
