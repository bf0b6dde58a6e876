#pragma once

// Run configuration and its text format.
//
//   # comment
//   [scenario]
//   name = navigation
//   body_radius = 0.1, 0.2     # ranges: "lo, hi" or a single value
//   [algo]
//   mode = cohet_team
//
// Every key has a default; unknown sections or keys are rejected. The same
// key table drives parsing and `to_text`, so an echoed config re-parses to an
// identical RunConfig.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cohet/env.hpp"
#include "cohet/intrinsic.hpp"
#include "cohet/nn.hpp"
#include "cohet/policy.hpp"

namespace cohet {

enum class AlgoMode { kCohetTeam, kCohetSelf, kBaseline, kIppo };

inline std::string to_string(AlgoMode m) {
  switch (m) {
    case AlgoMode::kCohetTeam: return "cohet_team";
    case AlgoMode::kCohetSelf: return "cohet_self";
    case AlgoMode::kBaseline: return "baseline";
    case AlgoMode::kIppo: return "ippo";
  }
  return "?";
}

// Accepts '-' or '_' as separator; "hetgppo" and "baseline_hetgppo" alias "baseline".
inline AlgoMode algo_from_string(std::string s) {
  for (char& c : s) {
    if (c == '-') c = '_';
  }
  if (s == "cohet_team") return AlgoMode::kCohetTeam;
  if (s == "cohet_self") return AlgoMode::kCohetSelf;
  if (s == "baseline" || s == "hetgppo" || s == "baseline_hetgppo") return AlgoMode::kBaseline;
  if (s == "ippo") return AlgoMode::kIppo;
  throw std::invalid_argument("unknown algorithm mode '" + s + "'");
}

struct AlgoConfig {
  AlgoMode mode = AlgoMode::kCohetTeam;
  double beta = 0.01;
  intrinsic::Norm norm = intrinsic::Norm::kL2;
  bool backprop_through_comm = false;
  policy::Aggregation aggregation = policy::Aggregation::kSum;
  int dynamics_batch = 256;
  int replay_capacity = 20000;
  double dynamics_lr = 1e-3;
  int dynamics_hidden = 64;

  bool operator==(const AlgoConfig&) const = default;
};

struct PpoConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  int epochs = 4;
  int minibatch_size = 512;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double learning_rate = 3e-4;
  int train_batch_size = 6000;

  bool operator==(const PpoConfig&) const = default;
};

struct ModelConfig {
  int hidden_width = 64;
  int hidden_layers = 2;
  int d_z = 32;
  int h_dim = 64;
  double init_log_std = -0.5;
  nn::Activation activation = nn::Activation::kReLU;

  bool operator==(const ModelConfig&) const = default;
};

struct RunBlock {
  std::vector<std::uint64_t> seeds{0};
  int iterations = 300;
  int n_envs = 60;
  std::string output_dir = "runs";
  int checkpoint_every = 50;

  bool operator==(const RunBlock&) const = default;
};

struct RunConfig {
  env::ScenarioSpec scenario;
  AlgoConfig algo;
  PpoConfig ppo;
  ModelConfig model;
  RunBlock run;

  bool operator==(const RunConfig&) const = default;

  int steps_per_env() const { return ppo.train_batch_size / run.n_envs; }

  policy::PolicyDims policy_dims() const {
    policy::PolicyDims d;
    d.x_dim = env::task_dim(scenario);
    d.d_z = model.d_z;
    d.h_dim = model.h_dim;
    d.action_dim = env::kActionDim;
    d.hidden.assign(static_cast<std::size_t>(model.hidden_layers), model.hidden_width);
    d.activation = model.activation;
    return d;
  }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double to_double(const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) throw std::invalid_argument("expected a number, got '" + v + "'");
  if (!std::isfinite(out) && v != "inf") throw std::invalid_argument("expected a finite number");
  return out;
}

inline long long to_int(const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || v.empty()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  return out;
}

inline std::string fmt_double(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

struct Key {
  std::string section;
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Getter>
Key real_key(std::string sec, std::string name, Getter ref, std::function<void(double)> check) {
  return {std::move(sec), std::move(name),
          [ref, check](RunConfig& c, const std::string& v) {
            const double x = to_double(v);
            if (check) check(x);
            ref(c) = x;
          },
          [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Getter>
Key int_key(std::string sec, std::string name, Getter ref, long long min_value) {
  return {std::move(sec), std::move(name),
          [ref, min_value](RunConfig& c, const std::string& v) {
            const long long x = to_int(v);
            if (x < min_value) throw std::invalid_argument("must be >= " + std::to_string(min_value));
            if (x > 2000000000LL) throw std::invalid_argument("value too large");
            ref(c) = static_cast<int>(x);
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Getter>
Key bool_key(std::string sec, std::string name, Getter ref) {
  return {std::move(sec), std::move(name),
          [ref](RunConfig& c, const std::string& v) { ref(c) = to_bool(v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Getter>
Key range_key(std::string sec, std::string name, Getter ref) {
  return {std::move(sec), std::move(name),
          [ref](RunConfig& c, const std::string& v) {
            const auto parts = split_list(v);
            env::Range r;
            if (parts.size() == 1) {
              r.lo = r.hi = to_double(parts[0]);
            } else if (parts.size() == 2) {
              r.lo = to_double(parts[0]);
              r.hi = to_double(parts[1]);
            } else {
              throw std::invalid_argument("expected 'lo, hi' or a single value");
            }
            require(r.lo > 0.0 && r.hi >= r.lo, "range needs 0 < lo <= hi");
            ref(c) = r;
          },
          [ref](const RunConfig& c) {
            const env::Range& r = ref(const_cast<RunConfig&>(c));
            return fmt_double(r.lo) + ", " + fmt_double(r.hi);
          }};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    auto positive = [](double x) { require(x > 0.0, "must be > 0"); };
    auto non_negative = [](double x) { require(x >= 0.0, "must be >= 0"); };
    auto unit = [](double x) { require(x >= 0.0 && x <= 1.0, "must lie in [0, 1]"); };

    // [scenario]
    k.push_back({"scenario", "name",
                 [](RunConfig& c, const std::string& v) { c.scenario.kind = env::scenario_from_string(v); },
                 [](const RunConfig& c) { return env::to_string(c.scenario.kind); }});
    k.push_back(int_key("scenario", "n_agents", [](RunConfig& c) -> int& { return c.scenario.n_agents; }, 1));
    k.push_back(real_key("scenario", "world_half_extent",
                         [](RunConfig& c) -> double& { return c.scenario.world_half_extent; }, positive));
    k.push_back(int_key("scenario", "horizon", [](RunConfig& c) -> int& { return c.scenario.horizon; }, 1));
    k.push_back(real_key("scenario", "dt", [](RunConfig& c) -> double& { return c.scenario.dt; }, positive));
    k.push_back(real_key("scenario", "drag", [](RunConfig& c) -> double& { return c.scenario.drag; },
                         [](double x) { require(x >= 0.0 && x < 1.0, "must lie in [0, 1)"); }));
    k.push_back(real_key("scenario", "mass", [](RunConfig& c) -> double& { return c.scenario.mass; }, positive));
    k.push_back(bool_key("scenario", "sparse", [](RunConfig& c) -> bool& { return c.scenario.sparse; }));
    k.push_back(real_key("scenario", "occupancy_bonus",
                         [](RunConfig& c) -> double& { return c.scenario.occupancy_bonus; }, nullptr));
    k.push_back(real_key("scenario", "collision_penalty",
                         [](RunConfig& c) -> double& { return c.scenario.collision_penalty; }, non_negative));
    k.push_back(real_key("scenario", "distance_coef",
                         [](RunConfig& c) -> double& { return c.scenario.distance_coef; }, non_negative));
    k.push_back(real_key("scenario", "flock_velocity_coef",
                         [](RunConfig& c) -> double& { return c.scenario.flock_velocity_coef; }, non_negative));
    k.push_back(real_key("scenario", "flock_distance_coef",
                         [](RunConfig& c) -> double& { return c.scenario.flock_distance_coef; }, non_negative));
    k.push_back(range_key("scenario", "body_radius", [](RunConfig& c) -> env::Range& { return c.scenario.body_radius; }));
    k.push_back(range_key("scenario", "max_speed", [](RunConfig& c) -> env::Range& { return c.scenario.max_speed; }));
    k.push_back(range_key("scenario", "max_force", [](RunConfig& c) -> env::Range& { return c.scenario.max_force; }));
    k.push_back(range_key("scenario", "obs_radius", [](RunConfig& c) -> env::Range& { return c.scenario.obs_radius; }));
    k.push_back(int_key("scenario", "n_obstacles", [](RunConfig& c) -> int& { return c.scenario.n_obstacles; }, 0));
    k.push_back(range_key("scenario", "obstacle_radius",
                          [](RunConfig& c) -> env::Range& { return c.scenario.obstacle_radius; }));
    k.push_back(real_key("scenario", "landmark_spacing",
                         [](RunConfig& c) -> double& { return c.scenario.landmark_spacing; }, non_negative));
    k.push_back(int_key("scenario", "placement_retries",
                        [](RunConfig& c) -> int& { return c.scenario.placement_retries; }, 1));

    // [algo]
    k.push_back({"algo", "mode", [](RunConfig& c, const std::string& v) { c.algo.mode = algo_from_string(v); },
                 [](const RunConfig& c) { return to_string(c.algo.mode); }});
    k.push_back(real_key("algo", "beta", [](RunConfig& c) -> double& { return c.algo.beta; }, non_negative));
    k.push_back({"algo", "norm", [](RunConfig& c, const std::string& v) { c.algo.norm = intrinsic::norm_from_string(v); },
                 [](const RunConfig& c) { return intrinsic::to_string(c.algo.norm); }});
    k.push_back(bool_key("algo", "backprop_through_comm",
                         [](RunConfig& c) -> bool& { return c.algo.backprop_through_comm; }));
    k.push_back({"algo", "aggregation",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "sum") c.algo.aggregation = policy::Aggregation::kSum;
                   else if (v == "mean") c.algo.aggregation = policy::Aggregation::kMean;
                   else throw std::invalid_argument("expected sum or mean");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.algo.aggregation == policy::Aggregation::kSum ? "sum" : "mean");
                 }});
    k.push_back(int_key("algo", "dynamics_batch", [](RunConfig& c) -> int& { return c.algo.dynamics_batch; }, 1));
    k.push_back(int_key("algo", "replay_capacity", [](RunConfig& c) -> int& { return c.algo.replay_capacity; }, 1));
    k.push_back(real_key("algo", "dynamics_lr", [](RunConfig& c) -> double& { return c.algo.dynamics_lr; }, positive));
    k.push_back(int_key("algo", "dynamics_hidden", [](RunConfig& c) -> int& { return c.algo.dynamics_hidden; }, 1));

    // [ppo]
    k.push_back(real_key("ppo", "gamma", [](RunConfig& c) -> double& { return c.ppo.gamma; }, unit));
    k.push_back(real_key("ppo", "gae_lambda", [](RunConfig& c) -> double& { return c.ppo.gae_lambda; }, unit));
    k.push_back(real_key("ppo", "clip_epsilon", [](RunConfig& c) -> double& { return c.ppo.clip_epsilon; }, positive));
    k.push_back(int_key("ppo", "epochs", [](RunConfig& c) -> int& { return c.ppo.epochs; }, 1));
    k.push_back(int_key("ppo", "minibatch_size", [](RunConfig& c) -> int& { return c.ppo.minibatch_size; }, 1));
    k.push_back(real_key("ppo", "value_coef", [](RunConfig& c) -> double& { return c.ppo.value_coef; }, non_negative));
    k.push_back(real_key("ppo", "entropy_coef", [](RunConfig& c) -> double& { return c.ppo.entropy_coef; }, non_negative));
    k.push_back(real_key("ppo", "learning_rate", [](RunConfig& c) -> double& { return c.ppo.learning_rate; }, positive));
    k.push_back(int_key("ppo", "train_batch_size", [](RunConfig& c) -> int& { return c.ppo.train_batch_size; }, 1));

    // [model]
    k.push_back(int_key("model", "hidden_width", [](RunConfig& c) -> int& { return c.model.hidden_width; }, 1));
    k.push_back(int_key("model", "hidden_layers", [](RunConfig& c) -> int& { return c.model.hidden_layers; }, 0));
    k.push_back(int_key("model", "d_z", [](RunConfig& c) -> int& { return c.model.d_z; }, 1));
    k.push_back(int_key("model", "h_dim", [](RunConfig& c) -> int& { return c.model.h_dim; }, 1));
    k.push_back(real_key("model", "init_log_std", [](RunConfig& c) -> double& { return c.model.init_log_std; },
                         [](double x) { require(x >= nn::kLogStdMin && x <= nn::kLogStdMax, "must lie in [-5, 2]"); }));
    k.push_back({"model", "activation",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "relu") c.model.activation = nn::Activation::kReLU;
                   else if (v == "tanh") c.model.activation = nn::Activation::kTanh;
                   else throw std::invalid_argument("expected relu or tanh");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.model.activation == nn::Activation::kReLU ? "relu" : "tanh");
                 }});

    // [run]
    k.push_back({"run", "seeds",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<std::uint64_t> seeds;
                   for (const auto& p : split_list(v)) {
                     const long long s = to_int(p);
                     require(s >= 0, "seeds must be non-negative");
                     seeds.push_back(static_cast<std::uint64_t>(s));
                   }
                   require(!seeds.empty(), "at least one seed required");
                   c.run.seeds = std::move(seeds);
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.run.seeds.size(); ++i) {
                     if (i) s += ", ";
                     s += std::to_string(c.run.seeds[i]);
                   }
                   return s;
                 }});
    k.push_back(int_key("run", "iterations", [](RunConfig& c) -> int& { return c.run.iterations; }, 0));
    k.push_back(int_key("run", "n_envs", [](RunConfig& c) -> int& { return c.run.n_envs; }, 1));
    k.push_back({"run", "output_dir",
                 [](RunConfig& c, const std::string& v) {
                   require(!v.empty(), "must not be empty");
                   c.run.output_dir = v;
                 },
                 [](const RunConfig& c) { return c.run.output_dir; }});
    k.push_back(int_key("run", "checkpoint_every", [](RunConfig& c) -> int& { return c.run.checkpoint_every; }, 1));
    return k;
  }();
  return table;
}

}  // namespace config_detail

// Cross-field constraints. Throws ConfigError naming the offending key.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& key, const std::string& msg) {
    throw ConfigError("config: key '" + key + "': " + msg);
  };
  if (c.ppo.train_batch_size % c.run.n_envs != 0) {
    fail("ppo.train_batch_size", "must be a multiple of run.n_envs");
  }
  if (c.ppo.gamma < 0.0 || c.ppo.gamma > 1.0) fail("ppo.gamma", "must lie in [0, 1]");
  if (c.algo.beta < 0.0) fail("algo.beta", "must be >= 0");
  try {
    c.scenario.validate();
  } catch (const std::exception& e) {
    fail("scenario", e.what());
  }
}

inline RunConfig parse_config_text(const std::string& text, const std::string& source = "<config>") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  std::map<std::string, int> seen;
  auto error = [&](const std::string& key, const std::string& msg) {
    return ConfigError(source + ":" + std::to_string(lineno) + ": " +
                       (key.empty() ? std::string() : "key '" + key + "': ") + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string s = config_detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw error("", "malformed section header");
      section = config_detail::trim(s.substr(1, s.size() - 2));
      bool known = false;
      for (const auto& k : config_detail::keys()) known = known || k.section == section;
      if (!known) throw error("", "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw error("", "expected key = value");
    const std::string key = config_detail::trim(s.substr(0, eq));
    const std::string value = config_detail::trim(s.substr(eq + 1));
    if (section.empty()) throw error(key, "key outside of any section");
    const std::string full = section + "." + key;
    const config_detail::Key* match = nullptr;
    for (const auto& k : config_detail::keys()) {
      if (k.section == section && k.name == key) match = &k;
    }
    if (match == nullptr) throw error(full, "unknown key");
    if (seen.count(full)) throw error(full, "duplicate key (first set on line " + std::to_string(seen[full]) + ")");
    seen[full] = lineno;
    try {
      match->set(cfg, value);
    } catch (const std::exception& e) {
      throw error(full, e.what());
    }
  }
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline std::string to_text(const RunConfig& c) {
  std::string out;
  std::string section;
  for (const auto& k : config_detail::keys()) {
    if (k.section != section) {
      if (!section.empty()) out += "\n";
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.name + " = " + k.get(c) + "\n";
  }
  return out;
}

}  // namespace cohet
