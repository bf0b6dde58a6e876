#pragma once

// Checkpoint file: a text manifest terminated by a line "end", followed by a
// payload of little-endian IEEE-754 float32 values in manifest order.
//
//   cohet-checkpoint 1
//   fingerprint 9f3a...
//   iteration 300
//   agents 3
//   agent 0 0.1375... 0.93... 1.07... 1.21... 0
//   array agent0.policy.omega.w0 64 11
//   ...
//   payload 123456
//   end

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohet/config.hpp"
#include "cohet/env.hpp"
#include "cohet/intrinsic.hpp"
#include "cohet/nn.hpp"
#include "cohet/policy.hpp"

namespace cohet::ckpt {

inline constexpr int kVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Hash of the scenario and model blocks of the config text.
inline std::string fingerprint(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  std::istringstream in(to_text(cfg));
  std::string line, section;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') section = line;
    if (section != "[scenario]" && section != "[model]") continue;
    for (unsigned char c : line + "\n") {
      h ^= c;
      h *= 1099511628211ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct CheckpointData {
  std::string fingerprint;
  int iteration = 0;
  std::vector<env::AgentSpec> agents;
  std::vector<policy::AgentModel> models;
  std::vector<nn::Mlp> dynamics;  // empty when the run had no dynamics models
};

namespace detail {

struct Array {
  std::string name;
  int rows = 0;
  int cols = 0;
  double* data = nullptr;
};

inline void add_mlp(std::vector<Array>& out, const std::string& prefix, nn::Mlp& m) {
  for (int l = 0; l < m.num_layers(); ++l) {
    auto& w = m.weights[static_cast<std::size_t>(l)];
    auto& b = m.biases[static_cast<std::size_t>(l)];
    out.push_back({prefix + ".w" + std::to_string(l), static_cast<int>(w.rows()), static_cast<int>(w.cols()), w.data()});
    out.push_back({prefix + ".b" + std::to_string(l), static_cast<int>(b.size()), 1, b.data()});
  }
}

inline std::vector<Array> layout(CheckpointData& d) {
  std::vector<Array> out;
  for (std::size_t i = 0; i < d.models.size(); ++i) {
    const std::string p = "agent" + std::to_string(i) + ".policy.";
    policy::AgentModel& m = d.models[i];
    add_mlp(out, p + "omega", m.omega);
    add_mlp(out, p + "psi", m.psi);
    add_mlp(out, p + "phi", m.phi);
    add_mlp(out, p + "pi", m.pi_decoder);
    add_mlp(out, p + "value", m.value_decoder);
    out.push_back({p + "log_std", static_cast<int>(m.log_std.size()), 1, m.log_std.data()});
  }
  for (std::size_t i = 0; i < d.dynamics.size(); ++i) {
    add_mlp(out, "agent" + std::to_string(i) + ".dynamics", d.dynamics[i]);
  }
  return out;
}

inline std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void put_f32(std::string& out, double x) {
  const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(x));
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((u >> (8 * k)) & 0xffu));
}

inline double get_f32(const char* p) {
  std::uint32_t u = 0;
  for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[k])) << (8 * k);
  return static_cast<double>(std::bit_cast<float>(u));
}

// Fresh models shaped by the config; values are overwritten on load.
inline CheckpointData skeleton(const RunConfig& cfg, bool with_dynamics) {
  CheckpointData d;
  const auto dims = cfg.policy_dims();
  for (int i = 0; i < cfg.scenario.n_agents; ++i) {
    d.models.push_back(policy::make_agent_model(dims, 0, cfg.model.init_log_std));
    if (with_dynamics) {
      d.dynamics.push_back(intrinsic::make_dynamics_model(i, env::obs_dim(cfg.scenario), env::kActionDim,
                                                          cfg.algo.dynamics_hidden, 1, {}, 0)
                               .f);
    }
  }
  return d;
}

}  // namespace detail

inline std::string serialize(const RunConfig& cfg, CheckpointData d) {
  d.fingerprint = fingerprint(cfg);
  std::string head = "cohet-checkpoint " + std::to_string(kVersion) + "\n";
  head += "fingerprint " + d.fingerprint + "\n";
  head += "iteration " + std::to_string(d.iteration) + "\n";
  head += "agents " + std::to_string(d.agents.size()) + "\n";
  for (const auto& a : d.agents) {
    head += "agent " + std::to_string(a.id) + " " + detail::fmt17(a.body_radius) + " " + detail::fmt17(a.max_speed) +
            " " + detail::fmt17(a.max_force) + " " + detail::fmt17(a.obs_radius) + " " + std::to_string(a.color_tag) +
            "\n";
  }
  head += std::string("dynamics ") + (d.dynamics.empty() ? "0" : "1") + "\n";
  std::string payload;
  std::size_t total = 0;
  for (const auto& arr : detail::layout(d)) {
    head += "array " + arr.name + " " + std::to_string(arr.rows) + " " + std::to_string(arr.cols) + "\n";
    const std::size_t n = static_cast<std::size_t>(arr.rows) * static_cast<std::size_t>(arr.cols);
    for (std::size_t k = 0; k < n; ++k) detail::put_f32(payload, arr.data[k]);
    total += n;
  }
  head += "payload " + std::to_string(total) + "\nend\n";
  return head + payload;
}

// All-or-nothing: the result is only returned once every check has passed.
inline CheckpointData deserialize(const std::string& bytes, const RunConfig& cfg) {
  const std::size_t end = bytes.find("\nend\n");
  if (end == std::string::npos) throw CheckpointError("checkpoint manifest is truncated");
  std::istringstream in(bytes.substr(0, end + 1));
  const char* payload = bytes.data() + end + 5;
  const std::size_t payload_bytes = bytes.size() - (end + 5);

  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "cohet-checkpoint") throw CheckpointError("not a checkpoint file");
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  std::string fp;
  int iteration = 0;
  std::size_t n_agents = 0;
  if (!(in >> tag >> fp) || tag != "fingerprint") throw CheckpointError("manifest: missing fingerprint");
  if (fp != fingerprint(cfg)) {
    throw CheckpointError("checkpoint fingerprint " + fp + " does not match scenario/model config " + fingerprint(cfg));
  }
  if (!(in >> tag >> iteration) || tag != "iteration") throw CheckpointError("manifest: missing iteration");
  if (!(in >> tag >> n_agents) || tag != "agents") throw CheckpointError("manifest: missing agent count");
  if (n_agents != static_cast<std::size_t>(cfg.scenario.n_agents)) throw CheckpointError("manifest: agent count mismatch");
  std::vector<env::AgentSpec> agents;
  for (std::size_t i = 0; i < n_agents; ++i) {
    env::AgentSpec a;
    if (!(in >> tag >> a.id >> a.body_radius >> a.max_speed >> a.max_force >> a.obs_radius >> a.color_tag) ||
        tag != "agent") {
      throw CheckpointError("manifest: bad agent line " + std::to_string(i));
    }
    agents.push_back(a);
  }
  int with_dyn = 0;
  if (!(in >> tag >> with_dyn) || tag != "dynamics") throw CheckpointError("manifest: missing dynamics flag");

  CheckpointData d = detail::skeleton(cfg, with_dyn != 0);
  d.fingerprint = fp;
  d.iteration = iteration;
  d.agents = std::move(agents);
  const auto arrays = detail::layout(d);
  std::size_t total = 0;
  for (const auto& arr : arrays) {
    std::string name;
    int rows = 0, cols = 0;
    if (!(in >> tag >> name >> rows >> cols) || tag != "array") throw CheckpointError("manifest: expected array " + arr.name);
    if (name != arr.name || rows != arr.rows || cols != arr.cols) {
      throw CheckpointError("manifest: array " + name + " [" + std::to_string(rows) + "x" + std::to_string(cols) +
                            "] incompatible with expected " + arr.name + " [" + std::to_string(arr.rows) + "x" +
                            std::to_string(arr.cols) + "]");
    }
    total += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
  std::size_t declared = 0;
  if (!(in >> tag >> declared) || tag != "payload") throw CheckpointError("manifest: missing payload size");
  if (declared != total) throw CheckpointError("manifest: payload size disagrees with arrays");
  if (payload_bytes != 4 * total) {
    throw CheckpointError("payload has " + std::to_string(payload_bytes) + " bytes, manifest requires " +
                          std::to_string(4 * total));
  }
  std::size_t off = 0;
  for (const auto& arr : arrays) {
    const std::size_t n = static_cast<std::size_t>(arr.rows) * static_cast<std::size_t>(arr.cols);
    for (std::size_t k = 0; k < n; ++k, off += 4) arr.data[k] = detail::get_f32(payload + off);
  }
  for (auto& m : d.models) m.log_std = nn::clamp_log_std(m.log_std);
  return d;
}

inline CheckpointData snapshot(const std::vector<env::AgentSpec>& agents,
                               const std::vector<policy::AgentModel>& models,
                               const std::vector<intrinsic::DynamicsModel>& dynamics, int iteration,
                               bool with_dynamics) {
  CheckpointData d;
  d.iteration = iteration;
  d.agents = agents;
  d.models = models;
  if (with_dynamics) {
    for (const auto& m : dynamics) d.dynamics.push_back(m.f);
  }
  return d;
}

inline void save(const std::string& path, const RunConfig& cfg, const CheckpointData& d) {
  const std::string bytes = serialize(cfg, d);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("short write to checkpoint '" + path + "'");
}

inline CheckpointData load(const std::string& path, const RunConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes, cfg);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace cohet::ckpt
