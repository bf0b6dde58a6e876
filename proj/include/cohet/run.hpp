#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohet/checkpoint.hpp"
#include "cohet/config.hpp"
#include "cohet/metrics.hpp"
#include "cohet/trainer.hpp"

namespace cohet::run {

namespace fs = std::filesystem;

class RunDirExists : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string run_dir(const std::string& root, std::uint64_t seed) {
  return (fs::path(root) / ("seed_" + std::to_string(seed))).string();
}

inline std::string checkpoint_path(const std::string& dir, int iteration) {
  return (fs::path(dir) / "checkpoints" / ("iter_" + std::to_string(iteration) + ".ckpt")).string();
}

struct RunResult {
  std::string dir;
  std::vector<train::IterationMetrics> history;
  double wall_seconds = 0.0;
  long long env_steps = 0;
};

inline std::string summary_line(const RunResult& r, const RunConfig& cfg, std::uint64_t seed) {
  std::string line = "run " + r.dir + ": algo=" + to_string(cfg.algo.mode) +
                     " scenario=" + env::to_string(cfg.scenario.kind) + " seed=" + std::to_string(seed) +
                     " iterations=" + std::to_string(r.history.size()) + " env_steps=" + std::to_string(r.env_steps);
  if (!r.history.empty()) line += " final_reward_mean=" + metrics::format_value(r.history.back().episodic_reward_mean);
  return line;
}

using IterationHook = std::function<void(const train::IterationMetrics&)>;

// Trains one (config, seed) pair into `dir`: config.ini, metrics.csv and
// checkpoints/iter_K.ckpt every checkpoint_every iterations and at the end.
inline RunResult train_run(const RunConfig& cfg, std::uint64_t seed, const std::string& dir, bool force,
                           const IterationHook& hook = {}) {
  validate(cfg);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw RunDirExists("run directory '" + dir + "' already exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(fs::path(dir) / "checkpoints");
  {
    std::ofstream echo(fs::path(dir) / "config.ini", std::ios::trunc);
    if (!echo) throw std::runtime_error("cannot write config echo in '" + dir + "'");
    echo << to_text(cfg);
  }
  metrics::CsvWriter csv((fs::path(dir) / "metrics.csv").string(), cfg.scenario.n_agents);
  RunResult res;
  res.dir = dir;
  const auto t0 = std::chrono::steady_clock::now();
  train::Trainer trainer(cfg, seed);
  const bool with_dyn = train::uses_dynamics(cfg.algo.mode);
  for (int k = 1; k <= cfg.run.iterations; ++k) {
    train::IterationMetrics m = trainer.iterate();
    csv.append(m);
    if (hook) hook(m);
    res.history.push_back(std::move(m));
    if (k % cfg.run.checkpoint_every == 0 || k == cfg.run.iterations) {
      ckpt::save(checkpoint_path(dir, k), cfg,
                 ckpt::snapshot(trainer.agents(), trainer.models(), trainer.dynamics(), k, with_dyn));
    }
  }
  res.env_steps = trainer.env_steps();
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace cohet::run
