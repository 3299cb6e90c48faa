#include "doctest.h"
#include "test_util.hpp"

#include "efc/trainer.hpp"

#include <numeric>

using namespace efc;
using namespace efc::testing;

namespace {

TaskStream tiny_stream(int tasks = 3, int per_task = 2, double mean_scale = 3.0, std::uint64_t seed = 5) {
  SplitSpec split;
  split.total_classes = tasks * per_task;
  split.per_step_classes = per_task;
  split.num_steps = tasks;
  SyntheticStreamSpec spec;
  spec.classes = split.total_classes;
  spec.input_dim = 6;
  spec.shared_dim = 0;
  spec.train_per_class = 20;
  spec.test_per_class = 20;
  spec.mean_scale = mean_scale;
  spec.seed = seed;
  return generate_synthetic_stream(spec, build_splits(split, 0));
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.architecture.hidden = {12};
  c.architecture.feature_dim = 8;
  c.epochs = 3;
  c.first_task_epochs = 3;
  c.rebalance_epochs = 3;
  c.batch_size = 16;
  c.lr_rebalance = 1e-2;
  return c;
}

bool same_model(const FeatureExtractor& a, const FeatureExtractor& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].weight != b.layers[l].weight || a.layers[l].bias != b.layers[l].bias) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("backbone training leaves old head columns bit-identical") {
  const TaskStream s = tiny_stream();
  const TrainConfig cfg = tiny_config();
  TaskState st = init_state(cfg, s.input_dim);
  run_task(st, s.train[0], cfg);
  const Matrix old_cols = st.head.weights;
  expand_for_task(st, s.train[1]);
  train_backbone(st, s.train[1], cfg);
  CHECK(st.head.weights.leftCols(2) == old_cols);
  CHECK(st.head.weights.rightCols(2) != Matrix::Zero(8, 2));
}

TEST_CASE("rebalancing freezes the backbone and is a no-op on the first task") {
  const TaskStream s = tiny_stream();
  const TrainConfig cfg = tiny_config();
  TaskState st = init_state(cfg, s.input_dim);
  expand_for_task(st, s.train[0]);
  const Matrix head0 = st.head.weights;
  const PhaseLog none = rebalance_classifier(st, s.train[0], cfg);
  CHECK(none.epoch_loss.empty());
  CHECK(st.head.weights == head0);

  st = init_state(cfg, s.input_dim);
  run_task(st, s.train[0], cfg);
  expand_for_task(st, s.train[1]);
  train_backbone(st, s.train[1], cfg);
  const FeatureExtractor before = st.model;
  const Matrix head_before = st.head.weights;
  const PhaseLog log = rebalance_classifier(st, s.train[1], cfg);
  CHECK(same_model(before, st.model));
  CHECK(st.head.weights.leftCols(2) != head_before.leftCols(2));  // full head trains
  CHECK(log.epoch_loss.size() == 3);
}

TEST_CASE("rebalancing lifts accuracy with exact prototypes") {
  const TaskStream s = tiny_stream(2, 2, 4.0);
  TrainConfig cfg = tiny_config();
  cfg.epochs = cfg.first_task_epochs = 20;
  cfg.rebalance_epochs = 30;
  cfg.lr_rebalance = 5e-2;
  TaskState st = init_state(cfg, s.input_dim);
  run_task(st, s.train[0], cfg);
  expand_for_task(st, s.train[1]);
  train_backbone(st, s.train[1], cfg);
  // Exact prototypes: recompute old statistics under the new backbone (diagnostic only).
  const Matrix f0 = extract_features(st.model, s.train[0].inputs);
  PrototypeStore exact;
  for (auto& p : compute_class_stats(f0, s.train[0].labels, s.train[0].class_ids(), 0)) exact.add(std::move(p));
  st.prototypes = exact;
  st.completed = 1;
  auto mean_acc = [&] {
    const auto a = evaluate_tasks(st, s, 1);
    return 0.5 * (a[0] + a[1]);
  };
  const double before = mean_acc();
  rebalance_classifier(st, s.train[1], cfg);
  CHECK(mean_acc() > before);
}

TEST_CASE("zero EFM strength reduces to the unregularized loss") {
  const TaskStream s = tiny_stream();
  TrainConfig a = tiny_config();
  a.regularizer.lambda_efm = 0.0;
  a.regularizer.eta = 0.0;
  TrainConfig b = a;
  b.strategy = Strategy::reg_ablation;
  b.regularizer.kind = RegularizerKind::none;
  TaskState sa = init_state(a, s.input_dim), sb = init_state(b, s.input_dim);
  for (std::size_t t = 0; t < 2; ++t) {
    run_task(sa, s.train[t], a);
    run_task(sb, s.train[t], b);
  }
  CHECK(same_model(sa.model, sb.model));
  CHECK(sa.head.weights == sb.head.weights);
}

TEST_CASE("one Adam step on a one-parameter backbone") {
  TaskStream s;
  TaskData d;
  d.inputs = Matrix::Constant(1, 1, 2.0);
  d.labels = {1};
  d.class_begin = 0;
  d.class_end = 2;
  s.train = s.test = {d};
  s.class_counts = {2};
  s.input_dim = 1;

  TrainConfig cfg;
  cfg.architecture.hidden = {};
  cfg.architecture.feature_dim = 1;
  cfg.first_task_epochs = 1;
  cfg.lr_backbone = cfg.lr_new_head = 0.01;
  cfg.weight_decay = 0.0;
  TaskState st = init_state(cfg, 1);
  expand_for_task(st, d);
  const double w = st.model.layers[0].weight(0, 0), bias = st.model.layers[0].bias[0];
  const double h0 = st.head.weights(0, 0), h1 = st.head.weights(0, 1);
  // f = 2w + b; z = f·(h0, h1); CE with label 1.
  const double f = 2 * w + bias;
  const double p0 = 1.0 / (1.0 + std::exp(f * (h1 - h0)));
  const double dz0 = p0, dz1 = -p0;  // p1 - 1 = -p0
  const double df = dz0 * h0 + dz1 * h1;
  auto adam = [&](double x, double g) { return x - 0.01 * g / (std::abs(g) + 1e-8); };
  train_backbone(st, d, cfg);
  CHECK(st.model.layers[0].weight(0, 0) == doctest::Approx(adam(w, 2 * df)).epsilon(1e-12));
  CHECK(st.model.layers[0].bias[0] == doctest::Approx(adam(bias, df)).epsilon(1e-12));
  CHECK(st.head.weights(0, 0) == doctest::Approx(adam(h0, f * dz0)).epsilon(1e-12));
  CHECK(st.head.weights(0, 1) == doctest::Approx(adam(h1, f * dz1)).epsilon(1e-12));
}

TEST_CASE("PR-ACE batch composition") {
  Rng rng(71);
  std::vector<int> old(10);
  std::iota(old.begin(), old.end(), 0);
  double proto = 0.0;
  const int draws = 4000;
  for (int i = 0; i < draws; ++i) {
    const auto c = prace_composition(old, 5, 64, rng);
    Index total = c.current;
    for (const auto& [cls, k] : c.prototype_quotas) {
      CHECK(cls < 10);
      total += k;
    }
    CHECK(total == 64);
    proto += double(64 - c.current) / 64.0;
  }
  CHECK(proto / draws == doctest::Approx(2.0 / 3.0).epsilon(0.01));
  const auto first = prace_composition(std::vector<int>{0, 1}, 2, 1000, rng);
  CHECK(double(first.current) / 1000.0 == doctest::Approx(0.5).epsilon(0.1));
  CHECK(prace_composition({}, 3, 8, rng).current == 8);
}

TEST_CASE("EFC first task equals EFC++ first task") {
  const TaskStream s = tiny_stream();
  TrainConfig a = tiny_config();
  TrainConfig b = a;
  b.strategy = Strategy::efc;
  TaskState sa = init_state(a, s.input_dim), sb = init_state(b, s.input_dim);
  run_task(sa, s.train[0], a);
  run_task(sb, s.train[0], b);
  CHECK(same_model(sa.model, sb.model));
  CHECK(sa.head.weights == sb.head.weights);
  CHECK(sa.efm->matrix == sb.efm->matrix);
}

TEST_CASE("EFM is taken with the post-rebalance head") {
  const TaskStream s = tiny_stream();
  const TrainConfig cfg = tiny_config();
  TaskState st = init_state(cfg, s.input_dim);
  run_task(st, s.train[0], cfg);
  const TaskLog log = run_task(st, s.train[1], cfg);
  std::vector<std::string> phases;
  for (const auto& p : log.phases) phases.push_back(p.phase);
  CHECK(phases == std::vector<std::string>{"backbone", "drift_compensation", "rebalance", "prototypes_and_efm"});
  CHECK(st.efm->matrix == dataset_efm(st.model, st.head, s.train[1].inputs, 1).matrix);
  CHECK(st.prototypes.size() == 4);
  CHECK(same_model(st.snapshot->extractor(), st.model));
  CHECK(st.completed == 2);
}

TEST_CASE("finetune trains the full head") {
  const TaskStream s = tiny_stream();
  TrainConfig cfg = tiny_config();
  cfg.strategy = Strategy::finetune;
  TaskState st = init_state(cfg, s.input_dim);
  run_task(st, s.train[0], cfg);
  const Matrix old_cols = st.head.weights;
  run_task(st, s.train[1], cfg);
  CHECK(st.head.weights.leftCols(2) != old_cols);
  CHECK(st.prototypes.empty());
  CHECK_FALSE(st.efm.has_value());
}

TEST_CASE("every strategy and regularizer runs a stream") {
  const TaskStream s = tiny_stream();
  for (const auto strategy : {Strategy::efcpp, Strategy::efc, Strategy::finetune}) {
    TrainConfig cfg = tiny_config();
    cfg.strategy = strategy;
    const StreamResult r = run_stream(s, cfg, StartMode::cold);
    CHECK(r.accuracy.last_complete_step() == 2);
    CHECK(r.logs.size() == 3);
  }
  for (const auto kind : {RegularizerKind::fd, RegularizerKind::kd, RegularizerKind::efim, RegularizerKind::none}) {
    TrainConfig cfg = tiny_config();
    cfg.strategy = Strategy::reg_ablation;
    cfg.regularizer.kind = kind;
    const StreamResult r = run_stream(s, cfg, StartMode::cold);
    CHECK(r.accuracy.last_complete_step() == 2);
    CHECK(r.final_state.efim.has_value() == (kind == RegularizerKind::efim));
  }
  TrainConfig bad = tiny_config();
  bad.regularizer.kind = RegularizerKind::fd;
  CHECK_THROWS(run_stream(s, bad, StartMode::cold));
}

TEST_CASE("training never reads past-task data") {
  const TaskStream s = tiny_stream();
  for (const auto strategy : {Strategy::efcpp, Strategy::efc}) {
    TrainConfig cfg = tiny_config();
    cfg.strategy = strategy;
    const StreamResult r = run_stream(s, cfg, StartMode::cold);
    REQUIRE(r.access_log.size() == 3);
    for (const auto& a : r.access_log) CHECK(a.requested == a.current);
  }
}

TEST_CASE("seeded runs are identical") {
  const TaskStream s = tiny_stream();
  TrainConfig cfg = tiny_config();
  const StreamResult a = run_stream(s, cfg, StartMode::cold);
  const StreamResult b = run_stream(s, cfg, StartMode::cold);
  CHECK(a.accuracy == b.accuracy);
  CHECK(same_model(a.final_state.model, b.final_state.model));
  cfg.seed = 2;
  const StreamResult c = run_stream(s, cfg, StartMode::cold);
  CHECK_FALSE(same_model(a.final_state.model, c.final_state.model));
}

TEST_CASE("observer sees the previous backbone") {
  const TaskStream s = tiny_stream();
  std::vector<bool> had_previous;
  run_stream(s, tiny_config(), StartMode::cold, [&](const TaskEvent& e) {
    had_previous.push_back(e.previous != nullptr);
    if (e.previous) CHECK_FALSE(same_model(*e.previous, e.state.model));
  });
  CHECK(had_previous == std::vector<bool>{false, true, true});
}

TEST_CASE("config validation") {
  TrainConfig c = tiny_config();
  c.epochs = 0;
  CHECK_THROWS(c.validate());
  c = tiny_config();
  c.lr_rebalance = 0;
  CHECK_THROWS(c.validate());
  CHECK_THROWS(parse_strategy("icarl"));
  CHECK(parse_strategy("efc++") == Strategy::efcpp);
}

}
