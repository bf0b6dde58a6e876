// cohet: train, evaluate, plot and self-test the decentralized MARL workbench.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cohet/checkpoint.hpp"
#include "cohet/config.hpp"
#include "cohet/plot.hpp"
#include "cohet/run.hpp"
#include "cohet/selftest.hpp"
#include "cohet/trainer.hpp"

namespace fs = std::filesystem;
using namespace cohet;

namespace {

struct Overrides {
  std::string config;
  std::string algo;
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::optional<int> iters;
  std::string out;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "config file (sections of key = value)");
  cmd->add_option("--algo", o.algo, "cohet_team | cohet_self | baseline | ippo");
  cmd->add_option("--scenario", o.scenario, "spread | navigation | flocking");
  cmd->add_option("--seed", o.seed, "single seed, replaces run.seeds");
  cmd->add_option("--iters", o.iters, "training iterations")->check(CLI::NonNegativeNumber);
}

RunConfig resolve(const Overrides& o, const std::string& fallback_config = {}) {
  RunConfig cfg;
  if (!o.config.empty()) {
    cfg = parse_config(o.config);
  } else if (!fallback_config.empty() && fs::exists(fallback_config)) {
    cfg = parse_config(fallback_config);
  }
  if (!o.algo.empty()) cfg.algo.mode = algo_from_string(o.algo);
  if (!o.scenario.empty()) cfg.scenario.kind = env::scenario_from_string(o.scenario);
  if (o.seed) cfg.run.seeds = {*o.seed};
  if (o.iters) cfg.run.iterations = *o.iters;
  if (!o.out.empty()) cfg.run.output_dir = o.out;
  validate(cfg);
  return cfg;
}

int cmd_train(const Overrides& o, bool force) {
  const RunConfig cfg = resolve(o);
  for (std::uint64_t seed : cfg.run.seeds) {
    const std::string dir = run::run_dir(cfg.run.output_dir, seed);
    const run::RunResult r = run::train_run(cfg, seed, dir, force);
    std::cout << run::summary_line(r, cfg, seed) << std::endl;
  }
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint, int episodes) {
  // Without --config, the run directory's config echo describes the checkpoint.
  const fs::path echo = fs::path(checkpoint).parent_path().parent_path() / "config.ini";
  const RunConfig cfg = resolve(o, echo.string());
  const std::uint64_t seed = cfg.run.seeds.empty() ? 0 : cfg.run.seeds.front();
  const ckpt::CheckpointData d = ckpt::load(checkpoint, cfg);
  const train::EvalResult r = train::evaluate(cfg, d.agents, d.models, episodes, seed);
  std::cout << "eval " << checkpoint << ": episodes=" << episodes << " seed=" << seed
            << " mean_reward=" << metrics::format_value(r.mean_return);
  for (std::size_t i = 0; i < r.agent_mean_return.size(); ++i) {
    std::cout << " agent" << i << "=" << metrics::format_value(r.agent_mean_return[i]);
  }
  std::cout << std::endl;
  return 0;
}

int cmd_plot(const std::vector<std::string>& dirs, const std::string& out) {
  const plot::PlotOutput r = plot::plot_runs(dirs, out);
  for (const auto& p : r.problems) std::cerr << "plot: " << p << "\n";
  for (const auto& f : r.files) std::cout << f << "\n";
  if (r.files.empty()) {
    std::cerr << "plot: no usable run directories\n";
    return 1;
  }
  return r.problems.empty() ? 0 : 1;
}

int cmd_selftest(std::uint64_t seed, const std::string& work) {
  selftest::Options opt;
  opt.seed = seed;
  opt.work_dir = work;
  bool all = true;
  selftest::run_all(opt, [&](const selftest::CheckResult& r) {
    std::cout << selftest::format_result(r) << std::endl;
    all = all && r.passed;
  });
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized heterogeneous multi-agent RL workbench"};
  app.require_subcommand(1);

  Overrides train_o;
  bool force = false;
  auto* train_cmd = app.add_subcommand("train", "train one run directory per seed");
  add_overrides(train_cmd, train_o);
  train_cmd->add_option("--out", train_o.out, "output root, replaces run.output_dir");
  train_cmd->add_flag("--force", force, "overwrite existing run directories");

  Overrides eval_o;
  std::string checkpoint;
  int episodes = 10;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint with the deterministic policy");
  eval_cmd->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  add_overrides(eval_cmd, eval_o);
  eval_cmd->add_option("--episodes", episodes, "evaluation episodes");

  std::vector<std::string> plot_dirs;
  std::string plot_out = "plots";
  auto* plot_cmd = app.add_subcommand("plot", "SVG charts and a merged CSV from run directories");
  plot_cmd->add_option("runs", plot_dirs, "run directories")->required();
  plot_cmd->add_option("--out", plot_out, "output directory");

  std::uint64_t st_seed = 0;
  std::string st_out;
  auto* st_cmd = app.add_subcommand("selftest", "run the oracle and property suite");
  st_cmd->add_option("--seed", st_seed, "seed for the random instances");
  st_cmd->add_option("--out", st_out, "scratch directory for the determinism runs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_o, force);
    if (*eval_cmd) return cmd_eval(eval_o, checkpoint, episodes);
    if (*plot_cmd) return cmd_plot(plot_dirs, plot_out);
    if (*st_cmd) return cmd_selftest(st_seed, st_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
