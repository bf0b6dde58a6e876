#pragma once

// Communication graph built from observation radii. Edge (i, j) means agent j
// lies within agent i's observation radius; i then receives j's embedding.

#include <Eigen/Dense>

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

#include "cohet/env.hpp"
#include "cohet/nn.hpp"

namespace cohet::graph {

using env::Vec2;
using nn::Vector;
using EdgeFeature = Eigen::Vector4d;  // (p_j - p_i, v_j - v_i)

inline constexpr int kEdgeDim = 4;

struct Edge {
  int from = 0;  // receiver i
  int to = 0;    // neighbor j
  bool operator==(const Edge&) const = default;
};

struct CommGraph {
  int n = 0;
  // Sorted by (from, to).
  std::vector<Edge> edges;
  std::vector<EdgeFeature> edge_features;
  // offsets[i] .. offsets[i + 1] index the outgoing edges of node i.
  std::vector<int> offsets;
  std::vector<Vector> node_features;

  std::span<const Edge> edges_of(int i) const {
    return std::span<const Edge>(edges).subspan(static_cast<std::size_t>(offsets[i]),
                                                static_cast<std::size_t>(offsets[i + 1] - offsets[i]));
  }

  std::vector<int> neighbors(int i) const {
    std::vector<int> out;
    for (const Edge& e : edges_of(i)) out.push_back(e.to);
    return out;
  }
};

// Drops the absolute position and velocity; what remains is the task part.
inline Vector trim_observation(const env::Observation& o) { return o.task; }

inline CommGraph build_comm_graph(std::span<const Vec2> pos, std::span<const Vec2> vel,
                                  std::span<const double> obs_radius,
                                  std::span<const env::Observation> observations) {
  const std::size_t n = pos.size();
  if (vel.size() != n || obs_radius.size() != n ||
      (!observations.empty() && observations.size() != n)) {
    throw std::invalid_argument("build_comm_graph: inconsistent array lengths");
  }
  CommGraph g;
  g.n = static_cast<int>(n);
  g.offsets.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const Vec2 dp = pos[j] - pos[i];
      if (dp.norm() <= obs_radius[i]) {
        const Vec2 dv = vel[j] - vel[i];
        g.edges.push_back({static_cast<int>(i), static_cast<int>(j)});
        g.edge_features.push_back(EdgeFeature(dp.x(), dp.y(), dv.x(), dv.y()));
      }
    }
    g.offsets[i + 1] = static_cast<int>(g.edges.size());
  }
  for (const env::Observation& o : observations) g.node_features.push_back(trim_observation(o));
  return g;
}

inline CommGraph build_comm_graph(const env::WorldState& s, std::span<const env::AgentSpec> agents,
                                  std::span<const env::Observation> observations) {
  std::vector<double> radii;
  for (const auto& a : agents) radii.push_back(a.obs_radius);
  return build_comm_graph(s.pos, s.vel, radii, observations);
}

struct NeighborSets {
  std::vector<int> now;    // N_i^t
  std::vector<int> next;   // N_i^{t+1}
  std::vector<int> both;   // N_i^t intersected with N_i^{t+1}
};

inline NeighborSets neighbor_sets(const CommGraph& g_t, const CommGraph& g_t1, int i) {
  if (g_t.n != g_t1.n) throw std::invalid_argument("neighbor_sets: graphs differ in size");
  NeighborSets s;
  s.now = g_t.neighbors(i);
  s.next = g_t1.neighbors(i);
  std::set_intersection(s.now.begin(), s.now.end(), s.next.begin(), s.next.end(),
                        std::back_inserter(s.both));
  return s;
}

}  // namespace cohet::graph
