// Acceptance driver: property suite plus the directional training criteria.
// Prints one PASS/FAIL line per criterion and exits nonzero if any fails.
//
//   cohet_acceptance --work DIR
//
// Training runs live in DIR/<group>/seed_K and are reused when their config
// echo, source stamp and metrics are complete.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cohet/metrics.hpp"
#include "cohet/run.hpp"
#include "cohet/selftest.hpp"

#ifndef COHET_SOURCE_STAMP
#define COHET_SOURCE_STAMP "unknown"
#endif

namespace fs = std::filesystem;
using namespace cohet;

namespace {

constexpr int kSeeds = 5;
constexpr double kDefaultBeta = 0.01;
const std::vector<double> kBetas{0.001, 0.01, 0.1};
const std::vector<int> kSweep{1, 2, 4, 8};

struct RunData {
  bool ok = false;
  std::string error;
  metrics::Table table;
  double seconds_per_step = NAN;
};

RunConfig navigation(AlgoMode mode, double beta, int n_agents) {
  RunConfig c;
  c.scenario.kind = env::ScenarioKind::kNavigation;
  c.scenario.sparse = true;
  c.scenario.n_agents = n_agents;
  c.scenario.horizon = 100;
  c.ppo.train_batch_size = 6000;
  c.run.n_envs = 60;
  c.run.iterations = 300;
  c.run.checkpoint_every = 300;
  c.algo.mode = mode;
  c.algo.beta = beta;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool reusable(const fs::path& dir, const RunConfig& cfg) {
  if (slurp(dir / "config.ini") != to_text(cfg)) return false;
  if (slurp(dir / "stamp") != COHET_SOURCE_STAMP) return false;
  if (!fs::exists(dir / "wall.txt")) return false;
  try {
    return static_cast<int>(metrics::read_csv((dir / "metrics.csv").string()).rows.size()) == cfg.run.iterations;
  } catch (const std::exception&) {
    return false;
  }
}

RunData get_run(const fs::path& root, const std::string& group, const RunConfig& cfg, std::uint64_t seed) {
  const fs::path dir = root / group / ("seed_" + std::to_string(seed));
  RunData d;
  try {
    if (!reusable(dir, cfg)) {
      std::cout << "training " << group << " seed " << seed << std::endl;
      const auto r = run::train_run(cfg, seed, dir.string(), true);
      std::ofstream(dir / "wall.txt") << r.wall_seconds << " " << r.env_steps << "\n";
      std::ofstream(dir / "stamp") << COHET_SOURCE_STAMP;
      std::cout << run::summary_line(r, cfg, seed) << " wall=" << r.wall_seconds << "s" << std::endl;
    }
    d.table = metrics::read_csv((dir / "metrics.csv").string());
    double wall = 0.0;
    long long steps = 0;
    std::istringstream(slurp(dir / "wall.txt")) >> wall >> steps;
    d.seconds_per_step = steps > 0 ? wall / static_cast<double>(steps) : NAN;
    d.ok = true;
  } catch (const std::exception& e) {
    d.error = group + " seed " + std::to_string(seed) + ": " + e.what();
    std::cout << "run failed: " << d.error << std::endl;
  }
  return d;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : NAN;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.empty() ? NAN : v[v.size() / 2];
}

// Mean of the last (or first) 10% of a series.
double tail_mean(const std::vector<double>& v, bool first = false) {
  const std::size_t n = std::max<std::size_t>(1, v.size() / 10);
  return first ? mean({v.begin(), v.begin() + static_cast<long>(n)}) : mean({v.end() - static_cast<long>(n), v.end()});
}

std::vector<double> seed_average(const std::vector<RunData>& runs, const std::string& column) {
  std::vector<double> out;
  for (std::size_t t = 0;; ++t) {
    std::vector<double> xs;
    for (const auto& r : runs) {
      const auto s = r.table.series(column);
      if (t >= s.size()) return out;
      xs.push_back(s[t]);
    }
    out.push_back(mean(xs));
  }
}

bool all_ok(const std::vector<RunData>& runs, std::string& why) {
  for (const auto& r : runs) {
    if (!r.ok) {
      why = r.error;
      return false;
    }
  }
  return true;
}

std::string fmt(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", x);
  return b;
}

struct Verdict {
  int id;
  std::string name;
  bool passed;
  std::string detail;
};

void report(std::vector<Verdict>& out, Verdict v) {
  std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << v.id << " " << v.name << ": " << v.detail << std::endl;
  out.push_back(std::move(v));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "cohet-acceptance";
  for (int k = 1; k < argc; ++k) {
    const std::string a = argv[k];
    if (a == "--work" && k + 1 < argc) {
      work = argv[++k];
    } else {
      std::cerr << "usage: cohet_acceptance [--work DIR]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  std::vector<Verdict> verdicts;

  selftest::Options opt;
  opt.work_dir = (work / "selftest").string();
  selftest::run_all(opt, [&](const selftest::CheckResult& r) {
    std::cout << selftest::format_result(r) << std::endl;
    verdicts.push_back({r.id, r.name, r.passed, r.detail});
  });

  std::map<std::string, std::vector<RunData>> runs;
  auto collect = [&](const std::string& group, const RunConfig& cfg) {
    auto& v = runs[group];
    for (int s = 0; s < kSeeds; ++s) v.push_back(get_run(work, group, cfg, static_cast<std::uint64_t>(s)));
    return v;
  };
  auto team_group = [](double b) { return "team_beta" + fmt(b); };
  collect("baseline", navigation(AlgoMode::kBaseline, kDefaultBeta, 3));
  for (double b : kBetas) collect(team_group(b), navigation(AlgoMode::kCohetTeam, b, 3));
  collect("self_beta" + fmt(kDefaultBeta), navigation(AlgoMode::kCohetSelf, kDefaultBeta, 3));
  for (int n : kSweep) collect("sweep_n" + std::to_string(n), navigation(AlgoMode::kCohetTeam, kDefaultBeta, n));

  const auto& base = runs["baseline"];
  const auto& team = runs[team_group(kDefaultBeta)];
  const auto& self = runs["self_beta" + fmt(kDefaultBeta)];

  // 8: best beta against the baseline, paired by seed.
  {
    std::string why;
    bool ok = all_ok(base, why);
    double best_beta = NAN, best_mean = -INFINITY;
    int best_wins = 0;
    std::ostringstream d;
    for (double b : kBetas) {
      const auto& t = runs[team_group(b)];
      ok = ok && all_ok(t, why);
      if (!ok) break;
      std::vector<double> diff;
      int wins = 0;
      for (int s = 0; s < kSeeds; ++s) {
        diff.push_back(tail_mean(t[s].table.series("episodic_reward_mean")) -
                       tail_mean(base[s].table.series("episodic_reward_mean")));
        wins += diff.back() > 0.0;
      }
      d << "beta=" << fmt(b) << " paired_mean=" << fmt(mean(diff)) << " wins=" << wins << "/" << kSeeds << "; ";
      if (mean(diff) > best_mean) {
        best_mean = mean(diff);
        best_beta = b;
        best_wins = wins;
      }
    }
    if (ok) d << "best beta=" << fmt(best_beta);
    report(verdicts, {8, "team beats baseline on sparse Navigation", ok && best_wins >= 4 && best_mean > 0.0,
                      ok ? d.str() : why});
  }

  // 9 and 10 use the default-beta team runs, seed-averaged per agent.
  {
    std::string why;
    bool ok = all_ok(team, why);
    std::ostringstream d;
    bool pass = ok;
    for (int i = 0; ok && i < 3; ++i) {
      auto r = seed_average(team, "intrinsic_reward_mean_" + std::to_string(i));
      for (double& x : r) x = std::abs(x);
      const double early = tail_mean(r, true), late = tail_mean(r);
      pass = pass && late < 0.25 * early;
      d << "agent" << i << " first10%=" << fmt(early) << " last10%=" << fmt(late) << " ratio=" << fmt(late / early)
        << "; ";
    }
    report(verdicts, {9, "intrinsic reward magnitude decays", pass, ok ? d.str() + "limit 0.25" : why});
  }
  {
    std::string why;
    bool ok = all_ok(team, why);
    std::ostringstream d;
    bool pass = ok;
    for (int i = 0; ok && i < 3; ++i) {
      const auto l = seed_average(team, "dynamics_loss_" + std::to_string(i));
      std::vector<double> smooth;
      for (std::size_t t = 9; t < l.size(); ++t) smooth.push_back(mean({l.begin() + static_cast<long>(t) - 9, l.begin() + static_cast<long>(t) + 1}));
      const double first = smooth.front(), last = smooth.back();
      pass = pass && last < 0.2 * first;
      d << "agent" << i << " initial=" << fmt(first) << " final=" << fmt(last) << " ratio=" << fmt(last / first)
        << "; ";
    }
    report(verdicts, {10, "dynamics loss declines", pass, ok ? d.str() + "limit 0.2" : why});
  }

  // 11: final |r_int| of team and self within a factor of 10.
  {
    std::string why;
    const bool ok = all_ok(team, why) && all_ok(self, why);
    auto final_mag = [](const std::vector<RunData>& rs) {
      std::vector<double> per_agent;
      for (int i = 0; i < 3; ++i) {
        auto r = seed_average(rs, "intrinsic_reward_mean_" + std::to_string(i));
        for (double& x : r) x = std::abs(x);
        per_agent.push_back(tail_mean(r));
      }
      return mean(per_agent);
    };
    double a = NAN, b = NAN;
    if (ok) {
      a = final_mag(team);
      b = final_mag(self);
    }
    const double ratio = std::max(a, b) / std::min(a, b);
    report(verdicts, {11, "team and self intrinsic rewards comparable", ok && ratio <= 10.0,
                      ok ? "team=" + fmt(a) + " self=" + fmt(b) + " ratio=" + fmt(ratio) + " limit 10" : why});
  }

  // 12: agent-count sweep.
  {
    std::string why;
    bool ok = true;
    std::map<int, double> reward, step_time;
    std::ostringstream d;
    for (int n : kSweep) {
      const auto& rs = runs["sweep_n" + std::to_string(n)];
      if (!all_ok(rs, why)) {
        ok = false;
        break;
      }
      std::vector<double> finals, times;
      for (const auto& r : rs) {
        for (const auto& row : r.table.rows) {
          for (std::size_t c = 0; c < row.size(); ++c) {
            if (r.table.columns[c].rfind("dynamics_loss_", 0) == 0 && !std::isfinite(row[c])) {
              ok = false;
              why = "non-finite dynamics loss at N=" + std::to_string(n);
            }
          }
        }
        finals.push_back(tail_mean(r.table.series("episodic_reward_mean")) / n);
        times.push_back(r.seconds_per_step);
      }
      reward[n] = mean(finals);
      step_time[n] = median(times);
      d << "N=" << n << " reward/agent=" << fmt(reward[n]) << " s/step=" << fmt(step_time[n]) << "; ";
    }
    bool pass = ok;
    if (ok) {
      const double r1 = reward[1], r8 = reward[8];
      pass = r8 >= r1 - 0.2 * std::abs(r1);
      d << "N=8 needs reward/agent >= " << fmt(r1 - 0.2 * std::abs(r1)) << "; ";
      for (int a : kSweep) {
        for (int b : kSweep) {
          if (b > a && step_time[b] / step_time[a] > static_cast<double>(b * b) / (a * a)) {
            pass = false;
            d << "step time N=" << a << "->" << b << " grows faster than quadratic; ";
          }
        }
      }
    }
    report(verdicts, {12, "agent-count sweep", pass, ok ? d.str() : why});
  }

  std::cout << "\nsummary\n";
  int failed = 0;
  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  for (const auto& v : verdicts) {
    std::cout << (v.passed ? "PASS" : "FAIL") << " criterion " << v.id << " " << v.name << std::endl;
    failed += !v.passed;
  }
  return failed == 0 ? 0 : 1;
}
