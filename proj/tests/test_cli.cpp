#include "doctest.h"

#include "efc/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace efc;
namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "classes=6\nnum_steps=3\nper_step_classes=2\ninput_dim=6\nshared_dim=0\ntrain_per_class=20\ntest_per_class=10\n"
    "hidden=12\nfeature_dim=8\nepochs=2\nfirst_task_epochs=2\nrebalance_epochs=2\nbatch_size=16\nseeds=1,2\n";

ExperimentConfig tiny(const std::string& name, const fs::path& root) {
  ExperimentConfig c;
  apply_config(c, parse_key_values(kTiny));
  c.name = name;
  c.output_dir = root.string();
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("efc_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("key=value parsing") {
  const auto kv = parse_key_values("# comment\n a = 1 \n\nb=x,y # trailing\n");
  CHECK(kv.at("a") == "1");
  CHECK(kv.at("b") == "x,y");
  CHECK_THROWS(parse_key_values("novalue\n"));
  CHECK_THROWS(parse_key_values("a=1\na=2\n"));
  ExperimentConfig c;
  CHECK_THROWS(apply_config(c, {{"nonsense", "1"}}));
  CHECK_THROWS(apply_config(c, {{"epochs", "ten"}}));
  CHECK_THROWS(apply_config(c, {{"update_prototypes", "maybe"}}));
  CHECK_THROWS(apply_config(c, {{"regularizer", "l2"}}));
}

TEST_CASE("resolved config round-trips") {
  ExperimentConfig c = tiny("x", "/tmp");
  c.train.regularizer.lambda_kd = 12.5;
  const std::string text = resolved_config_text(c);
  ExperimentConfig d;
  apply_config(d, parse_key_values(text));
  CHECK(resolved_config_text(d) == text);
  for (const auto& k : config_keys()) CHECK(text.find(k.name + "=") != std::string::npos);
}

TEST_CASE("validation") {
  ExperimentConfig c;
  c.data_source = "csv";
  CHECK_THROWS(c.validate());
  c.data_path = "/nonexistent.csv";
  CHECK_THROWS(c.validate());
  ExperimentConfig d;
  d.seeds.clear();
  CHECK_THROWS(d.validate());
  ExperimentConfig e;
  e.split.per_step_classes = 7;
  CHECK_THROWS(e.validate());
}

TEST_CASE("aggregate uses the sample standard deviation") {
  MetricsReport a, b;
  a.a_step = 0.5;
  b.a_step = 0.7;
  const Aggregate agg = aggregate_reports({a, b});
  CHECK(agg.mean.at("A_step") == doctest::Approx(0.6));
  CHECK(agg.stddev.at("A_step") == doctest::Approx(std::sqrt(0.02)));
}

TEST_CASE("run writes per-seed artifacts and is deterministic") {
  const fs::path root = scratch("run");
  ExperimentConfig c = tiny("exp", root);
  c.save_checkpoints = true;
  const fs::path dir = cmd_run(c);
  CHECK(dir == root / "exp");
  for (const char* seed : {"seed_1", "seed_2"}) {
    for (const char* f : {"log.jsonl", "accuracy_matrix.csv", "metrics.json", "config_resolved.txt"}) {
      CHECK(fs::exists(dir / seed / f));
    }
    CHECK(fs::exists(dir / seed / "checkpoints" / "task_2" / "checkpoint.json"));
  }
  CHECK(fs::exists(dir / "aggregate.json"));
  CHECK_FALSE(fs::exists(dir / "seed_3"));

  const std::string agg = slurp(dir / "aggregate.json");
  const std::string acc = slurp(dir / "seed_1" / "accuracy_matrix.csv");
  const std::string met = slurp(dir / "seed_2" / "metrics.json");
  cmd_run(c);
  CHECK(slurp(dir / "aggregate.json") == agg);
  CHECK(slurp(dir / "seed_1" / "accuracy_matrix.csv") == acc);
  CHECK(slurp(dir / "seed_2" / "metrics.json") == met);

  std::ifstream csv(dir / "seed_1" / "accuracy_matrix.csv");
  const AccuracyMatrix m = read_accuracy_csv(csv);
  CHECK(m.last_complete_step() == 2);

  SUBCASE("spectrum follows the rank law") {
    const fs::path out = cmd_spectrum(dir / "seed_1", 1e-8);
    std::ifstream in(out);
    std::string line;
    std::getline(in, line);
    CHECK(line == "task_index,eigen_index,eigenvalue,rank");
    std::map<int, int> rank;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string t, i, v, r;
      std::getline(ss, t, ',');
      std::getline(ss, i, ',');
      std::getline(ss, v, ',');
      std::getline(ss, r, ',');
      rank[std::stoi(t)] = std::stoi(r);
    }
    CHECK(rank == std::map<int, int>{{0, 1}, {1, 3}, {2, 5}});
  }
  SUBCASE("perturb with zero scale changes nothing") {
    const fs::path out = cmd_perturb(dir / "seed_1" / "checkpoints" / "task_1", c, 0.0);
    std::ifstream in(out);
    std::string line;
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      CHECK(line.find(",0,0,") != std::string::npos);
    }
    CHECK(rows == 2);
  }
  SUBCASE("drift on identical snapshots is zero") {
    const fs::path seed = dir / "seed_1";
    fs::remove_all(seed / "checkpoints" / "task_2");
    fs::remove_all(seed / "checkpoints" / "task_1");
    fs::copy(seed / "checkpoints" / "task_0", seed / "checkpoints" / "task_1", fs::copy_options::recursive);
    cmd_drift(seed);
    const std::string summary = slurp(seed / "drift_summary.csv");
    CHECK(summary == "task_index,delta\n1,0\n");
    CHECK(fs::exists(seed / "prototype_gap.csv"));
  }
  SUBCASE("missing checkpoints are errors") {
    CHECK_THROWS(cmd_spectrum(root, 1e-8));
    CHECK_THROWS(cmd_drift(root));
  }
}

TEST_CASE("ablate emits the comparison table") {
  const fs::path root = scratch("ablate");
  ExperimentConfig c = tiny("abl", root);
  c.seeds = {1};
  c.ablate_regularizers = {"efm"};
  const fs::path dir = cmd_ablate(c);
  const std::string table = slurp(dir / "ablation.csv");
  CHECK(table.rfind("regularizer,F,PL,A_step\nefm,", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 2);
  const std::string upd = slurp(dir / "prototype_update.csv");
  CHECK(upd.find("\nupdate,") != std::string::npos);
  CHECK(upd.find("\nno_update,") != std::string::npos);
}

TEST_CASE("command-line tool") {
  const fs::path root = scratch("tool");
  const fs::path cfg = root / "tiny.cfg";
  fs::create_directories(root);
  std::ofstream(cfg) << kTiny;
  const std::string bin = EFCPP_BINARY;

  const std::string help = root.string() + "/help.txt";
  CHECK(std::system((bin + " run --help > " + help).c_str()) == 0);
  const std::string text = slurp(help);
  for (const char* k : {"--lambda_efm", "--drift_bandwidth_sq", "--seeds", "--config"}) CHECK(text.find(k) != std::string::npos);

  const std::string env = "EFC_OUTPUT_ROOT=" + root.string() + "/out ";
  CHECK(std::system((env + bin + " run --config " + cfg.string() + " --seeds 3 --name cli > /dev/null").c_str()) == 0);
  CHECK(fs::exists(root / "out" / "cli" / "seed_3" / "metrics.json"));
  const std::string resolved = slurp(root / "out" / "cli" / "config_resolved.txt");
  CHECK(resolved.find("seeds=3\n") != std::string::npos);
  CHECK(resolved.find("epochs=2\n") != std::string::npos);

  CHECK(std::system((env + bin + " run --data_source csv --name bad > /dev/null 2>&1").c_str()) != 0);
  CHECK(std::system((bin + " spectrum --dir " + root.string() + " > /dev/null 2>&1").c_str()) != 0);
  CHECK(std::system((bin + " > /dev/null 2>&1").c_str()) != 0);
}

}
