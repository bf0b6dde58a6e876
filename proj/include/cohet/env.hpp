#pragma once

// 2D particle world with heterogeneous agents. Double-integrator bodies,
// semi-implicit Euler, positional projection for contacts, and three
// cooperative scenarios: Spread, Navigation and Flocking.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohet/nn.hpp"
#include "cohet/rng.hpp"

namespace cohet::env {

using Vec2 = Eigen::Vector2d;
using nn::Vector;

enum class ScenarioKind { kSpread, kNavigation, kFlocking };

inline std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::kSpread: return "spread";
    case ScenarioKind::kNavigation: return "navigation";
    case ScenarioKind::kFlocking: return "flocking";
  }
  return "?";
}

inline ScenarioKind scenario_from_string(const std::string& s) {
  if (s == "spread") return ScenarioKind::kSpread;
  if (s == "navigation") return ScenarioKind::kNavigation;
  if (s == "flocking") return ScenarioKind::kFlocking;
  throw std::invalid_argument("unknown scenario '" + s + "'");
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double draw(Rng& rng) const {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  bool operator==(const Range&) const = default;
};

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::kNavigation;
  int n_agents = 3;
  double world_half_extent = 1.5;  // m; spawn region, the world itself is unbounded
  int horizon = 100;
  double dt = 0.1;     // s
  double drag = 0.05;  // fraction of velocity lost per step
  double mass = 1.0;
  bool sparse = true;

  double occupancy_bonus = 1.0;
  double collision_penalty = 0.1;
  double distance_coef = 1.0;  // dense shaping weight (Spread, Navigation)
  double flock_velocity_coef = 0.1;
  double flock_distance_coef = 0.1;

  Range body_radius{0.1, 0.2};
  Range max_speed{0.6, 1.2};
  Range max_force{0.6, 1.2};
  Range obs_radius{0.8, 1.6};

  int n_obstacles = 2;  // Flocking only
  Range obstacle_radius{0.1, 0.2};
  double landmark_spacing = 0.2;
  int placement_retries = 1000;

  void validate() const {
    if (n_agents < 1) throw std::invalid_argument("n_agents must be >= 1");
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be > 0");
    if (drag < 0.0 || drag >= 1.0) throw std::invalid_argument("drag must be in [0, 1)");
    if (!(mass > 0.0)) throw std::invalid_argument("mass must be > 0");
    if (!(world_half_extent > 0.0)) throw std::invalid_argument("world_half_extent must be > 0");
    for (const Range* r : {&body_radius, &max_speed, &max_force, &obs_radius, &obstacle_radius}) {
      if (!(r->lo > 0.0) || r->hi < r->lo) {
        throw std::invalid_argument("heterogeneity ranges need 0 < lo <= hi");
      }
    }
    if (n_obstacles < 0) throw std::invalid_argument("n_obstacles must be >= 0");
  }

  int n_landmarks() const { return kind == ScenarioKind::kFlocking ? 1 : n_agents; }

  bool operator==(const ScenarioSpec&) const = default;
};

struct AgentSpec {
  int id = 0;
  double body_radius = 0.1;
  double max_speed = 1.0;
  double max_force = 1.0;
  double obs_radius = 1.0;
  int color_tag = 0;

  bool operator==(const AgentSpec&) const = default;
};

struct WorldState {
  std::vector<Vec2> pos;
  std::vector<Vec2> vel;
  std::vector<Vec2> landmarks;
  std::vector<int> landmark_tags;
  std::vector<Vec2> obstacles;
  std::vector<double> obstacle_radius;
  // Contacts resolved by the step that produced this state, per agent.
  std::vector<int> contacts;
  int t = 0;
  int horizon = 1;

  bool done() const { return t >= horizon; }
  int n_agents() const { return static_cast<int>(pos.size()); }
};

struct Observation {
  Vec2 pos = Vec2::Zero();
  Vec2 vel = Vec2::Zero();
  Vector task;

  // (p, v, task) laid out contiguously.
  Vector flat() const {
    Vector o(4 + task.size());
    o << pos, vel, task;
    return o;
  }
};

// Per-entity slot of (dx, dy, visible). Spread: one slot per landmark.
// Navigation: unmasked offset to the own goal, then one slot per landmark.
// Flocking: the landmark slot and the nearest visible obstacle slot.
inline int task_dim(const ScenarioSpec& s) {
  switch (s.kind) {
    case ScenarioKind::kSpread: return 3 * s.n_landmarks();
    case ScenarioKind::kNavigation: return 2 + 3 * s.n_landmarks();
    case ScenarioKind::kFlocking: return 6;
  }
  return 0;
}

inline int obs_dim(const ScenarioSpec& s) { return 4 + task_dim(s); }

inline constexpr int kActionDim = 2;

inline std::vector<AgentSpec> draw_agents(const ScenarioSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, Stream::kHeterogeneity);
  std::vector<AgentSpec> agents(static_cast<std::size_t>(spec.n_agents));
  for (int i = 0; i < spec.n_agents; ++i) {
    AgentSpec& a = agents[static_cast<std::size_t>(i)];
    a.id = i;
    a.body_radius = spec.body_radius.draw(rng);
    a.max_speed = spec.max_speed.draw(rng);
    a.max_force = spec.max_force.draw(rng);
    a.obs_radius = spec.obs_radius.draw(rng);
    a.color_tag = i;
  }
  return agents;
}

inline int goal_landmark(const WorldState& s, const AgentSpec& a) {
  for (std::size_t k = 0; k < s.landmark_tags.size(); ++k) {
    if (s.landmark_tags[k] == a.color_tag) return static_cast<int>(k);
  }
  throw std::logic_error("no landmark carries color tag " + std::to_string(a.color_tag));
}

inline Observation observe(const ScenarioSpec& spec, const WorldState& s, const AgentSpec& a) {
  const Vec2 p = s.pos.at(static_cast<std::size_t>(a.id));
  Observation o;
  o.pos = p;
  o.vel = s.vel[static_cast<std::size_t>(a.id)];
  o.task = Vector::Zero(task_dim(spec));
  int k = 0;
  auto put_slot = [&](const Vec2& target, bool visible) {
    if (visible) {
      const Vec2 d = target - p;
      o.task[k] = d.x();
      o.task[k + 1] = d.y();
      o.task[k + 2] = 1.0;
    }
    k += 3;
  };
  auto visible = [&](const Vec2& target) { return (target - p).norm() <= a.obs_radius; };

  switch (spec.kind) {
    case ScenarioKind::kNavigation: {
      const Vec2 d = s.landmarks[static_cast<std::size_t>(goal_landmark(s, a))] - p;
      o.task[0] = d.x();
      o.task[1] = d.y();
      k = 2;
      for (const Vec2& l : s.landmarks) put_slot(l, visible(l));
      break;
    }
    case ScenarioKind::kSpread:
      for (const Vec2& l : s.landmarks) put_slot(l, visible(l));
      break;
    case ScenarioKind::kFlocking: {
      put_slot(s.landmarks[0], visible(s.landmarks[0]));
      int best = -1;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < s.obstacles.size(); ++m) {
        const double d = (s.obstacles[m] - p).norm();
        if (d <= a.obs_radius && d < best_d) {
          best_d = d;
          best = static_cast<int>(m);
        }
      }
      put_slot(best >= 0 ? s.obstacles[static_cast<std::size_t>(best)] : Vec2::Zero(), best >= 0);
      break;
    }
  }
  return o;
}

inline std::vector<Observation> observe_all(const ScenarioSpec& spec, const WorldState& s,
                                            std::span<const AgentSpec> agents) {
  std::vector<Observation> out;
  out.reserve(agents.size());
  for (const AgentSpec& a : agents) out.push_back(observe(spec, s, a));
  return out;
}

struct Scenario {
  std::vector<AgentSpec> agents;
  WorldState state;
  std::vector<Observation> observations;
};

// Places agents, landmarks and obstacles uniformly in the spawn square
// without overlap, keeping the given agent physics.
inline Scenario reset(const ScenarioSpec& spec, std::vector<AgentSpec> agents, std::uint64_t seed) {
  spec.validate();
  if (static_cast<int>(agents.size()) != spec.n_agents) {
    throw std::invalid_argument("reset: agent count does not match scenario");
  }
  Rng rng = make_rng(seed, Stream::kEnvReset);
  std::uniform_real_distribution<double> coord(-spec.world_half_extent, spec.world_half_extent);
  auto draw_point = [&](auto&& ok, const char* what) {
    for (int attempt = 0; attempt < spec.placement_retries; ++attempt) {
      const double x = coord(rng);
      const double y = coord(rng);
      Vec2 p(x, y);
      if (ok(p)) return p;
    }
    throw std::runtime_error(std::string("placement failed for ") + what + " after " +
                             std::to_string(spec.placement_retries) +
                             " attempts; spawn region too small");
  };

  Scenario sc;
  WorldState& s = sc.state;
  s.horizon = spec.horizon;
  s.t = 0;
  const std::size_t n = agents.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = agents[i].body_radius;
    s.pos.push_back(draw_point(
        [&](const Vec2& p) {
          for (std::size_t j = 0; j < s.pos.size(); ++j) {
            if ((p - s.pos[j]).norm() <= r + agents[j].body_radius) return false;
          }
          return true;
        },
        "agent"));
    s.vel.push_back(Vec2::Zero());
  }
  for (int k = 0; k < spec.n_landmarks(); ++k) {
    s.landmarks.push_back(draw_point(
        [&](const Vec2& p) {
          for (std::size_t i = 0; i < n; ++i) {
            if ((p - s.pos[i]).norm() <= agents[i].body_radius) return false;
          }
          for (const Vec2& l : s.landmarks) {
            if ((p - l).norm() < spec.landmark_spacing) return false;
          }
          return true;
        },
        "landmark"));
    s.landmark_tags.push_back(k);
  }
  if (spec.kind == ScenarioKind::kFlocking) {
    for (int m = 0; m < spec.n_obstacles; ++m) {
      const double ro = spec.obstacle_radius.draw(rng);
      s.obstacles.push_back(draw_point(
          [&](const Vec2& p) {
            for (std::size_t i = 0; i < n; ++i) {
              if ((p - s.pos[i]).norm() <= ro + agents[i].body_radius) return false;
            }
            for (const Vec2& l : s.landmarks) {
              if ((p - l).norm() <= ro) return false;
            }
            for (std::size_t q = 0; q < s.obstacles.size(); ++q) {
              if ((p - s.obstacles[q]).norm() <= ro + s.obstacle_radius[q]) return false;
            }
            return true;
          },
          "obstacle"));
      s.obstacle_radius.push_back(ro);
    }
  }
  s.contacts.assign(n, 0);
  sc.agents = std::move(agents);
  sc.observations = observe_all(spec, s, sc.agents);
  return sc;
}

// Draws heterogeneous agent physics and a fresh layout, both from `seed`.
inline Scenario make_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  return reset(spec, draw_agents(spec, seed), seed);
}

inline double extrinsic_reward(const ScenarioSpec& spec, std::span<const AgentSpec> agents,
                               const WorldState& /*state*/, const WorldState& next,
                               int agent) {
  const auto i = static_cast<std::size_t>(agent);
  const AgentSpec& a = agents[i];
  const Vec2& p = next.pos[i];
  double r = -spec.collision_penalty * static_cast<double>(next.contacts[i]);
  switch (spec.kind) {
    case ScenarioKind::kSpread: {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec2& l : next.landmarks) best = std::min(best, (l - p).norm());
      if (!spec.sparse) r -= spec.distance_coef * best;
      if (best <= a.body_radius) r += spec.occupancy_bonus;
      break;
    }
    case ScenarioKind::kNavigation: {
      const double d = (next.landmarks[static_cast<std::size_t>(goal_landmark(next, a))] - p).norm();
      if (!spec.sparse) r -= spec.distance_coef * d;
      if (d <= a.body_radius) r += spec.occupancy_bonus;
      break;
    }
    case ScenarioKind::kFlocking: {
      if (spec.sparse) {
        if ((next.landmarks[0] - p).norm() <= a.body_radius) r += spec.occupancy_bonus;
      } else {
        double mean_d = 0.0;
        const std::size_t n = next.pos.size();
        if (n > 1) {
          for (std::size_t j = 0; j < n; ++j) {
            if (j != i) mean_d += (next.pos[j] - p).norm();
          }
          mean_d /= static_cast<double>(n - 1);
        }
        r += spec.flock_velocity_coef * next.vel[i].norm() - spec.flock_distance_coef * mean_d;
      }
      break;
    }
  }
  return r;
}

struct StepResult {
  WorldState state;
  std::vector<Observation> observations;
  std::vector<double> rewards;
  bool done = false;
};

inline StepResult step(const ScenarioSpec& spec, std::span<const AgentSpec> agents,
                       const WorldState& state, std::span<const Vec2> forces) {
  if (state.done()) throw std::logic_error("step called on a finished episode");
  const std::size_t n = agents.size();
  if (forces.size() != n || state.pos.size() != n) {
    throw std::invalid_argument("step: joint action size does not match agent count");
  }
  StepResult out;
  WorldState& s = out.state;
  s = state;
  for (std::size_t i = 0; i < n; ++i) {
    if (!forces[i].allFinite()) {
      throw std::invalid_argument("step: non-finite force for agent " + std::to_string(i));
    }
    Vec2 f = forces[i];
    const double fn = f.norm();
    if (fn > agents[i].max_force) f *= agents[i].max_force / fn;
    Vec2 v = (s.vel[i] + f * (spec.dt / spec.mass)) * (1.0 - spec.drag);
    const double vn = v.norm();
    if (vn > agents[i].max_speed) v *= agents[i].max_speed / vn;
    s.vel[i] = v;
    s.pos[i] += v * spec.dt;
  }
  s.contacts.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      Vec2 d = s.pos[j] - s.pos[i];
      const double dist = d.norm();
      const double overlap = agents[i].body_radius + agents[j].body_radius - dist;
      if (overlap > 0.0) {
        ++s.contacts[i];
        ++s.contacts[j];
        const Vec2 dir = dist > 0.0 ? Vec2(d / dist) : Vec2(1.0, 0.0);
        s.pos[i] -= dir * (0.5 * overlap);
        s.pos[j] += dir * (0.5 * overlap);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < s.obstacles.size(); ++m) {
      Vec2 d = s.pos[i] - s.obstacles[m];
      const double dist = d.norm();
      const double overlap = agents[i].body_radius + s.obstacle_radius[m] - dist;
      if (overlap > 0.0) {
        ++s.contacts[i];
        const Vec2 dir = dist > 0.0 ? Vec2(d / dist) : Vec2(1.0, 0.0);
        s.pos[i] += dir * overlap;
      }
    }
  }
  ++s.t;
  out.observations = observe_all(spec, s, agents);
  out.rewards.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.rewards[i] = extrinsic_reward(spec, agents, state, s, static_cast<int>(i));
  }
  out.done = s.done();
  return out;
}

}  // namespace cohet::env
