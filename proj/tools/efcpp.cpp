// efcpp: command-line runner for exemplar-free class-incremental experiments.

#include "efc/experiment.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>

namespace fs = std::filesystem;

namespace {

struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> flags;
};

// Adds --config plus one --<key> flag per registry entry, each showing its default.
void add_config_options(CLI::App* app, ConfigOptions& opts) {
  app->add_option("--config", opts.config_file, "key=value config file; flags override it")->check(CLI::ExistingFile);
  static const efc::ExperimentConfig defaults;
  for (const auto& key : efc::config_keys()) {
    const std::string name = key.name;
    app->add_option_function<std::string>(
           "--" + name, [&opts, name](const std::string& v) { opts.flags[name] = v; }, key.help)
        ->default_str(key.get(defaults))
        ->type_name("VALUE");
  }
}

efc::ExperimentConfig resolve(const ConfigOptions& opts, const fs::path& fallback = {}) {
  efc::ExperimentConfig config;
  if (!opts.config_file.empty()) {
    config = efc::load_config_file(opts.config_file);
  } else if (!fallback.empty() && fs::exists(fallback)) {
    config = efc::load_config_file(fallback);
  }
  efc::apply_config(config, opts.flags);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exemplar-free class-incremental learning with Elastic Feature Consolidation"};
  app.require_subcommand(1);

  ConfigOptions run_opts, ablate_opts, perturb_opts;
  auto* run = app.add_subcommand("run", "train one strategy over every seed");
  add_config_options(run, run_opts);
  auto* ablate = app.add_subcommand("ablate", "regularizer and prototype-update ablations");
  add_config_options(ablate, ablate_opts);

  std::string spectrum_dir;
  std::optional<double> spectrum_tol;
  auto* spectrum = app.add_subcommand("spectrum", "EFM eigenvalues per task checkpoint");
  spectrum->add_option("--dir", spectrum_dir, "seed directory containing checkpoints/")->required();
  spectrum->add_option("--rel_tol", spectrum_tol, "relative eigenvalue tolerance (default: the run's spectrum_rel_tol)");

  std::string drift_dir;
  auto* drift = app.add_subcommand("drift", "class-mean drift and prototype gap per task");
  drift->add_option("--dir", drift_dir, "seed directory containing checkpoints/")->required();

  std::string checkpoint_dir;
  auto* perturb = app.add_subcommand("perturb", "principal vs non-principal feature perturbations");
  perturb->add_option("--checkpoint", checkpoint_dir, "task checkpoint directory")->required();
  add_config_options(perturb, perturb_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    fs::path out;
    if (run->parsed()) {
      out = efc::cmd_run(resolve(run_opts));
    } else if (ablate->parsed()) {
      out = efc::cmd_ablate(resolve(ablate_opts));
    } else if (spectrum->parsed()) {
      double tol = 1e-8;
      if (spectrum_tol) {
        tol = *spectrum_tol;
      } else if (fs::exists(fs::path(spectrum_dir) / "config_resolved.txt")) {
        tol = efc::load_config_file(fs::path(spectrum_dir) / "config_resolved.txt").spectrum_rel_tol;
      }
      out = efc::cmd_spectrum(spectrum_dir, tol);
    } else if (drift->parsed()) {
      out = efc::cmd_drift(drift_dir);
    } else if (perturb->parsed()) {
      const fs::path ckpt(checkpoint_dir);
      const auto config = resolve(perturb_opts, ckpt.parent_path().parent_path() / "config_resolved.txt");
      out = efc::cmd_perturb(ckpt, config, config.perturb_sigma);
    }
    std::cout << out.string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
