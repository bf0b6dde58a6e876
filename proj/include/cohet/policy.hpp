#pragma once

// Per-agent graph actor-critic. Agent i owns an encoder omega_i, the message
// kernel (psi_i for the self term, phi_i for neighbor messages), an action
// decoder and a value decoder. Nothing is shared between agents:
//
//   z_i = omega_i(x_i)
//   h_i = psi_i(z_i) + sum_{j in N_i} phi_i(z_j || e_ij)
//   a_i ~ N(pi_i(h_i), exp(log_std_i)),  V_i = value_i(h_i)
//
// z_j is produced by agent j's own encoder and received over the graph.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cohet/graph.hpp"
#include "cohet/nn.hpp"
#include "cohet/rng.hpp"

namespace cohet::policy {

using nn::Matrix;
using nn::Vector;

enum class Aggregation { kSum, kMean };

struct PolicyDims {
  int x_dim = 1;
  int d_z = 32;
  int h_dim = 64;
  int action_dim = 2;
  std::vector<int> hidden{64, 64};
  nn::Activation activation = nn::Activation::kReLU;

  int message_dim() const { return d_z + graph::kEdgeDim; }
  bool operator==(const PolicyDims&) const = default;
};

struct AgentModel {
  nn::Mlp omega;          // x -> z
  nn::Mlp psi;            // z -> h
  nn::Mlp phi;            // z_j || e_ij -> h
  nn::Mlp pi_decoder;     // h -> action mean
  nn::Mlp value_decoder;  // h -> V
  Vector log_std;
};

inline nn::MlpSpec make_spec(int in, const std::vector<int>& hidden, int out, nn::Activation act) {
  nn::MlpSpec s;
  s.layer_sizes.push_back(in);
  s.layer_sizes.insert(s.layer_sizes.end(), hidden.begin(), hidden.end());
  s.layer_sizes.push_back(out);
  s.activation = act;
  return s;
}

inline AgentModel make_agent_model(const PolicyDims& d, std::uint64_t seed, double init_log_std) {
  Rng rng(seed);
  AgentModel m;
  m.omega = nn::mlp_init(make_spec(d.x_dim, d.hidden, d.d_z, d.activation), rng);
  m.psi = nn::mlp_init(make_spec(d.d_z, d.hidden, d.h_dim, d.activation), rng);
  m.phi = nn::mlp_init(make_spec(d.message_dim(), d.hidden, d.h_dim, d.activation), rng);
  m.pi_decoder = nn::mlp_init(make_spec(d.h_dim, d.hidden, d.action_dim, d.activation), rng);
  m.value_decoder = nn::mlp_init(make_spec(d.h_dim, d.hidden, 1, d.activation), rng);
  m.log_std = nn::clamp_log_std(Vector::Constant(d.action_dim, init_log_std));
  return m;
}

// Incoming messages for a batch of B receiver columns. Column m of `inputs`
// is z_j || e_ij and is delivered to receiver column target[m].
struct MessageBatch {
  Matrix inputs;
  std::vector<int> target;
  std::vector<int> sender;  // agent id of j, needed only to route gradients back

  int size() const { return static_cast<int>(target.size()); }
};

// Permutation-invariant aggregation: per receiver and output dimension the
// addends are sorted before summation, so the result does not depend on the
// order in which messages arrive.
inline Matrix aggregate_messages(const Matrix& phi_out, std::span<const int> target, int n_receivers,
                                 Aggregation agg) {
  Matrix out = Matrix::Zero(phi_out.rows(), n_receivers);
  std::vector<std::vector<int>> groups(static_cast<std::size_t>(n_receivers));
  for (std::size_t m = 0; m < target.size(); ++m) {
    groups.at(static_cast<std::size_t>(target[m])).push_back(static_cast<int>(m));
  }
  std::vector<double> buf;
  for (int r = 0; r < n_receivers; ++r) {
    const auto& g = groups[static_cast<std::size_t>(r)];
    if (g.empty()) continue;
    for (Eigen::Index d = 0; d < phi_out.rows(); ++d) {
      buf.clear();
      for (int m : g) buf.push_back(phi_out(d, m));
      std::sort(buf.begin(), buf.end());
      double s = 0.0;
      for (double v : buf) s += v;
      if (agg == Aggregation::kMean) s /= static_cast<double>(g.size());
      out(d, r) = s;
    }
  }
  return out;
}

inline std::vector<int> message_counts(std::span<const int> target, int n_receivers) {
  std::vector<int> c(static_cast<std::size_t>(n_receivers), 0);
  for (int t : target) ++c.at(static_cast<std::size_t>(t));
  return c;
}

// Canonical message order: by receiver, then lexicographically by input
// column. Feeding phi a layout that does not depend on arrival order makes
// the result bit-identical under any permutation of neighbors.
inline std::vector<int> canonical_message_order(const MessageBatch& msgs) {
  std::vector<int> order(static_cast<std::size_t>(msgs.size()));
  for (int k = 0; k < msgs.size(); ++k) order[static_cast<std::size_t>(k)] = k;
  const Matrix& in = msgs.inputs;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const int ta = msgs.target[static_cast<std::size_t>(a)];
    const int tb = msgs.target[static_cast<std::size_t>(b)];
    if (ta != tb) return ta < tb;
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      if (in(r, a) != in(r, b)) return in(r, a) < in(r, b);
    }
    return false;
  });
  return order;
}

struct PolicyForward {
  nn::MlpForward omega;
  nn::MlpForward psi;
  nn::MlpForward phi;  // empty when no messages; columns in canonical order
  nn::MlpForward pi;
  nn::MlpForward value;
  bool has_messages = false;
  std::vector<int> msg_order;   // canonical position -> original message index
  std::vector<int> msg_target;  // receiver of each canonical position

  const Matrix& z() const { return omega.output; }
  const Matrix& mean() const { return pi.output; }
  const Matrix& values() const { return value.output; }
  Matrix h;
};

// Batched forward over B columns of non-absolute features. `msgs == nullptr`
// drops the neighbor sum entirely (the independent-learner pipeline).
inline PolicyForward policy_forward(const AgentModel& m, const Matrix& x, const MessageBatch* msgs,
                                    Aggregation agg = Aggregation::kSum) {
  PolicyForward f;
  f.omega = nn::mlp_forward(m.omega, x);
  f.psi = nn::mlp_forward(m.psi, f.omega.output);
  f.h = f.psi.output;
  if (msgs != nullptr && msgs->size() > 0) {
    if (msgs->inputs.cols() != msgs->size() || msgs->inputs.rows() != m.phi.input_dim()) {
      throw std::invalid_argument("policy_forward: message batch shape mismatch");
    }
    f.has_messages = true;
    f.msg_order = canonical_message_order(*msgs);
    Matrix sorted(msgs->inputs.rows(), msgs->size());
    f.msg_target.resize(f.msg_order.size());
    for (std::size_t k = 0; k < f.msg_order.size(); ++k) {
      sorted.col(static_cast<Eigen::Index>(k)) = msgs->inputs.col(f.msg_order[k]);
      f.msg_target[k] = msgs->target[static_cast<std::size_t>(f.msg_order[k])];
    }
    f.phi = nn::mlp_forward(m.phi, sorted);
    const Matrix agg_out =
        aggregate_messages(f.phi.output, f.msg_target, static_cast<int>(x.cols()), agg);
    const auto counts = message_counts(f.msg_target, static_cast<int>(x.cols()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) f.h.col(c) += agg_out.col(c);
    }
  }
  f.pi = nn::mlp_forward(m.pi_decoder, f.h);
  f.value = nn::mlp_forward(m.value_decoder, f.h);
  return f;
}

struct PolicyGrad {
  nn::MlpGrad omega, psi, phi, pi, value;
  Vector log_std;

  static PolicyGrad zeros_like(const AgentModel& m) {
    return {nn::MlpGrad::zeros_like(m.omega), nn::MlpGrad::zeros_like(m.psi),
            nn::MlpGrad::zeros_like(m.phi),   nn::MlpGrad::zeros_like(m.pi_decoder),
            nn::MlpGrad::zeros_like(m.value_decoder), Vector::Zero(m.log_std.size())};
  }
};

// Backpropagates d_mean (action_dim x B) and d_value (1 x B) through the
// decoders, the message kernel and the encoder. Returns the gradient with
// respect to the message inputs (message_dim x M); its first d_z rows are the
// gradients arriving at the senders' embeddings.
inline Matrix policy_backward(const AgentModel& m, const PolicyForward& f,
                              Aggregation agg, const Matrix& d_mean, const Matrix& d_value,
                              PolicyGrad& g) {
  Matrix dh = nn::mlp_backward(m.pi_decoder, f.pi.cache, d_mean, g.pi);
  dh += nn::mlp_backward(m.value_decoder, f.value.cache, d_value, g.value);
  Matrix d_msg;
  if (f.has_messages) {
    const auto counts = message_counts(f.msg_target, static_cast<int>(dh.cols()));
    const auto M = static_cast<Eigen::Index>(f.msg_order.size());
    Matrix d_phi(dh.rows(), M);
    for (Eigen::Index k = 0; k < M; ++k) {
      const int t = f.msg_target[static_cast<std::size_t>(k)];
      d_phi.col(k) = dh.col(t);
      if (agg == Aggregation::kMean) d_phi.col(k) /= static_cast<double>(counts[static_cast<std::size_t>(t)]);
    }
    const Matrix d_sorted = nn::mlp_backward(m.phi, f.phi.cache, d_phi, g.phi);
    d_msg.resize(d_sorted.rows(), M);
    for (Eigen::Index k = 0; k < M; ++k) d_msg.col(f.msg_order[static_cast<std::size_t>(k)]) = d_sorted.col(k);
  }
  const Matrix dz = nn::mlp_backward(m.psi, f.psi.cache, dh, g.psi);
  nn::mlp_backward(m.omega, f.omega.cache, dz, g.omega);
  return d_msg;
}

inline void append_blocks(AgentModel& m, nn::ParamBlocks& out) {
  nn::append_blocks(m.omega, out);
  nn::append_blocks(m.psi, out);
  nn::append_blocks(m.phi, out);
  nn::append_blocks(m.pi_decoder, out);
  nn::append_blocks(m.value_decoder, out);
  out.emplace_back(m.log_std.data(), static_cast<std::size_t>(m.log_std.size()));
}

inline void append_blocks(const PolicyGrad& g, nn::GradBlocks& out) {
  nn::append_blocks(g.omega, out);
  nn::append_blocks(g.psi, out);
  nn::append_blocks(g.phi, out);
  nn::append_blocks(g.pi, out);
  nn::append_blocks(g.value, out);
  out.emplace_back(g.log_std.data(), static_cast<std::size_t>(g.log_std.size()));
}

inline void adam_step(AgentModel& m, const PolicyGrad& g, nn::AdamState& state) {
  nn::ParamBlocks p;
  nn::GradBlocks gb;
  append_blocks(m, p);
  append_blocks(g, gb);
  nn::adam_update(p, gb, state);
  m.log_std = nn::clamp_log_std(m.log_std);
  for (nn::Mlp* mlp : {&m.omega, &m.psi, &m.phi, &m.pi_decoder, &m.value_decoder}) ++mlp->revision;
}

// ---------------------------------------------------------------------------
// Single-agent, single-step convenience API.

inline Vector encode_node(const AgentModel& m, const Vector& x) {
  if (x.size() != m.omega.input_dim()) {
    throw std::invalid_argument("encode_node: feature dimension mismatch");
  }
  return nn::mlp_apply_one(m.omega, x);
}

inline Vector gnn_forward(const AgentModel& m, const Vector& z_i, std::span<const Vector> z_neighbors,
                          std::span<const graph::EdgeFeature> e_neighbors,
                          Aggregation agg = Aggregation::kSum) {
  if (z_neighbors.size() != e_neighbors.size()) {
    throw std::invalid_argument("gnn_forward: embedding/edge count mismatch");
  }
  Vector h = nn::mlp_apply_one(m.psi, z_i);
  if (z_neighbors.empty()) return h;
  const int dz = static_cast<int>(z_i.size());
  MessageBatch mb;
  mb.inputs.resize(dz + graph::kEdgeDim, static_cast<Eigen::Index>(z_neighbors.size()));
  for (std::size_t k = 0; k < z_neighbors.size(); ++k) {
    mb.inputs.col(static_cast<Eigen::Index>(k)) << z_neighbors[k], e_neighbors[k];
    mb.target.push_back(0);
  }
  const auto order = canonical_message_order(mb);
  Matrix sorted(mb.inputs.rows(), mb.inputs.cols());
  for (std::size_t k = 0; k < order.size(); ++k) sorted.col(static_cast<Eigen::Index>(k)) = mb.inputs.col(order[k]);
  const Matrix out = nn::mlp_apply(m.phi, sorted);
  h += aggregate_messages(out, mb.target, 1, agg).col(0);
  return h;
}

struct ActionOutput {
  Vector mean;
  Vector action;
  double log_prob = 0.0;
  double value = 0.0;
};

// `rng == nullptr` selects deterministic mode: action = mean.
inline ActionOutput decode_action_value(const AgentModel& m, const Vector& h, Rng* rng) {
  if (!h.allFinite()) throw std::invalid_argument("decode_action_value: non-finite h");
  ActionOutput out;
  out.mean = nn::mlp_apply_one(m.pi_decoder, h);
  out.value = nn::mlp_apply_one(m.value_decoder, h)[0];
  out.action = rng ? nn::gaussian_sample(out.mean, m.log_std, *rng) : out.mean;
  out.log_prob = nn::gaussian_log_prob(out.mean, m.log_std, out.action);
  return out;
}

inline ActionOutput ippo_forward(const AgentModel& m, const Vector& x, Rng* rng) {
  const Vector z = encode_node(m, x);
  return decode_action_value(m, gnn_forward(m, z, {}, {}), rng);
}

}  // namespace cohet::policy
