#pragma once

// Property suite shared by `cohet selftest` and the acceptance binary. Every
// check compares the implementation against an independently written oracle
// or an exact invariant.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cohet/config.hpp"
#include "cohet/env.hpp"
#include "cohet/graph.hpp"
#include "cohet/intrinsic.hpp"
#include "cohet/metrics.hpp"
#include "cohet/nn.hpp"
#include "cohet/policy.hpp"
#include "cohet/rng.hpp"
#include "cohet/run.hpp"
#include "cohet/trainer.hpp"

namespace cohet::selftest {

using nn::Matrix;
using nn::Vector;

struct CheckResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
  double budget_seconds = 0.0;
};

namespace detail {

inline bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

inline Matrix rand_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
  return m;
}

inline int rand_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline double rand_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

struct FdStats {
  long checked = 0;
  long failed = 0;
  int instances = 0;
  std::string first_failure;
};

inline constexpr double kFdStep = 1e-6;
inline constexpr double kFdRtol = 1e-4;
// Absolute floor at the round-off level of a central difference with kFdStep.
inline constexpr double kFdAtol = 1e-9;

// Central differences over every coordinate of `params`; `analytic` holds the
// matching gradient blocks.
inline void fd_compare(const nn::ParamBlocks& params, const std::vector<std::vector<double>>& analytic,
                       const std::function<double()>& loss, const std::string& label, FdStats& st) {
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t k = 0; k < params[b].size(); ++k) {
      double& p = params[b][k];
      const double old = p;
      p = old + kFdStep;
      const double lp = loss();
      p = old - kFdStep;
      const double lm = loss();
      p = old;
      const double num = (lp - lm) / (2.0 * kFdStep);
      const double ana = analytic[b][k];
      ++st.checked;
      if (std::abs(ana - num) > kFdRtol * std::max(std::abs(ana), std::abs(num)) + kFdAtol) {
        ++st.failed;
        if (st.first_failure.empty()) {
          std::ostringstream os;
          os << label << " block " << b << " elem " << k << ": analytic " << ana << " vs numeric " << num;
          st.first_failure = os.str();
        }
      }
    }
  }
}

inline std::vector<std::vector<double>> copy_blocks(const nn::GradBlocks& g) {
  std::vector<std::vector<double>> out;
  for (const auto& s : g) out.emplace_back(s.begin(), s.end());
  return out;
}

inline std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

inline std::vector<double> vec_of(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

// Random biases keep pre-activations off the ReLU kink, where the derivative
// is undefined (zero-initialized biases put dead-input units exactly on it).
inline void jitter_biases(nn::Mlp& m, Rng& rng) {
  for (auto& b : m.biases) b = rand_matrix(b.size(), 1, rng, 0.5);
}

inline void jitter_biases(policy::AgentModel& m, Rng& rng) {
  for (nn::Mlp* p : {&m.omega, &m.psi, &m.phi, &m.pi_decoder, &m.value_decoder}) jitter_biases(*p, rng);
}

inline policy::PolicyDims small_dims(Rng& rng) {
  policy::PolicyDims d;
  d.x_dim = rand_int(rng, 1, 5);
  d.d_z = rand_int(rng, 1, 4);
  d.h_dim = rand_int(rng, 1, 5);
  d.action_dim = rand_int(rng, 1, 3);
  d.hidden = rand_int(rng, 0, 1) ? std::vector<int>{rand_int(rng, 2, 5)}
                                 : std::vector<int>{rand_int(rng, 2, 5), rand_int(rng, 2, 5)};
  d.activation = rand_int(rng, 0, 1) ? nn::Activation::kTanh : nn::Activation::kReLU;
  return d;
}

inline policy::MessageBatch rand_messages(const policy::PolicyDims& d, int receivers, int max_msgs, Rng& rng) {
  policy::MessageBatch mb;
  const int M = rand_int(rng, 0, max_msgs);
  mb.inputs = rand_matrix(d.message_dim(), M, rng);
  for (int k = 0; k < M; ++k) {
    mb.target.push_back(rand_int(rng, 0, receivers - 1));
    mb.sender.push_back(rand_int(rng, 0, 7));
  }
  return mb;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 1. Analytic gradients against central finite differences.

inline std::string gradient_checks(std::uint64_t seed, bool& ok) {
  using namespace detail;
  constexpr int kInstances = 20;
  std::ostringstream report;
  ok = true;
  auto finish = [&](const char* module, const FdStats& st) {
    report << module << ": " << st.instances << " instances, " << st.checked << " coords, " << st.failed
           << " over tolerance; ";
    if (st.failed > 0 || st.instances < kInstances) {
      ok = false;
      if (!st.first_failure.empty()) report << "[" << st.first_failure << "] ";
    }
  };

  {  // nn: MLP parameters and input, MSE, Gaussian log-density
    FdStats st;
    Rng rng = make_rng(seed, Stream::kInit, 101);
    for (int n = 0; n < kInstances; ++n, ++st.instances) {
      nn::MlpSpec spec;
      const int layers = rand_int(rng, 1, 3);
      for (int l = 0; l <= layers; ++l) spec.layer_sizes.push_back(rand_int(rng, 1, 6));
      spec.activation = n % 2 ? nn::Activation::kTanh : nn::Activation::kReLU;
      nn::Mlp m = nn::mlp_init(spec, rng);
      jitter_biases(m, rng);
      const int B = rand_int(rng, 1, 4);
      Matrix X = rand_matrix(m.input_dim(), B, rng);
      const Matrix W = rand_matrix(m.output_dim(), B, rng);
      const nn::MlpForward f = nn::mlp_forward(m, X);
      nn::MlpGrad g = nn::MlpGrad::zeros_like(m);
      const Matrix dX = nn::mlp_backward(m, f.cache, W, g);
      nn::ParamBlocks p;
      nn::GradBlocks gb;
      nn::append_blocks(m, p);
      nn::append_blocks(g, gb);
      auto analytic = copy_blocks(gb);
      p.push_back(span_of(X));
      analytic.push_back(vec_of(dX));
      fd_compare(p, analytic, [&] { return W.cwiseProduct(nn::mlp_apply(m, X)).sum(); }, "mlp", st);

      Matrix pred = rand_matrix(rand_int(rng, 1, 4), rand_int(rng, 1, 4), rng);
      const Matrix target = rand_matrix(pred.rows(), pred.cols(), rng);
      const auto l = nn::mse_loss(pred, target);
      fd_compare({span_of(pred)}, {vec_of(l.grad)}, [&] { return nn::mse_loss(pred, target).loss; }, "mse", st);

      const int A = rand_int(rng, 1, 3);
      Matrix mean = rand_matrix(A, 1, rng);
      Matrix log_std = rand_matrix(A, 1, rng, 1.0);
      const Vector action = rand_matrix(A, 1, rng, 2.0);
      const auto lg = nn::gaussian_log_prob_grad(mean, log_std, action);
      fd_compare({span_of(mean), span_of(log_std)}, {vec_of(lg.d_mean), vec_of(lg.d_log_std)},
                 [&] { return nn::gaussian_log_prob(mean, log_std, action); }, "gaussian", st);
    }
    finish("nn", st);
  }

  {  // policy: encoder, message kernel, decoders and message inputs
    FdStats st;
    Rng rng = make_rng(seed, Stream::kInit, 102);
    for (int n = 0; n < kInstances; ++n, ++st.instances) {
      const auto dims = small_dims(rng);
      policy::AgentModel m = policy::make_agent_model(dims, rng(), -0.5);
      jitter_biases(m, rng);
      const int B = rand_int(rng, 1, 4);
      const Matrix x = rand_matrix(dims.x_dim, B, rng);
      policy::MessageBatch msgs = rand_messages(dims, B, 6, rng);
      const auto agg = n % 2 ? policy::Aggregation::kMean : policy::Aggregation::kSum;
      const Matrix Wm = rand_matrix(dims.action_dim, B, rng);
      const Matrix Wv = rand_matrix(1, B, rng);
      const auto f = policy::policy_forward(m, x, &msgs, agg);
      policy::PolicyGrad g = policy::PolicyGrad::zeros_like(m);
      Matrix d_msg = policy::policy_backward(m, f, agg, Wm, Wv, g);
      if (msgs.size() == 0) d_msg = Matrix(dims.message_dim(), 0);
      nn::ParamBlocks p;
      nn::GradBlocks gb;
      policy::append_blocks(m, p);
      policy::append_blocks(g, gb);
      auto analytic = copy_blocks(gb);
      p.push_back(span_of(msgs.inputs));
      analytic.push_back(vec_of(d_msg));
      fd_compare(p, analytic,
                 [&] {
                   const auto ff = policy::policy_forward(m, x, &msgs, agg);
                   return Wm.cwiseProduct(ff.mean()).sum() + Wv.cwiseProduct(ff.values()).sum();
                 },
                 "policy", st);
    }
    finish("policy", st);
  }

  {  // dynamics model MSE
    FdStats st;
    Rng rng = make_rng(seed, Stream::kInit, 103);
    for (int n = 0; n < kInstances; ++n, ++st.instances) {
      const int od = rand_int(rng, 1, 5);
      const int ad = rand_int(rng, 1, 3);
      auto model = intrinsic::make_dynamics_model(0, od, ad, rand_int(rng, 2, 6), 16, {}, rng());
      jitter_biases(model.f, rng);
      std::vector<intrinsic::Transition> ts;
      const int B = rand_int(rng, 1, 6);
      for (int k = 0; k < B; ++k) {
        ts.push_back({0, rand_matrix(od, 1, rng), rand_matrix(ad, 1, rng), rand_matrix(od, 1, rng)});
      }
      std::vector<const intrinsic::Transition*> batch;
      for (const auto& t : ts) batch.push_back(&t);
      const auto lg = intrinsic::dynamics_loss_and_grad(model, batch);
      nn::ParamBlocks p;
      nn::GradBlocks gb;
      nn::append_blocks(model.f, p);
      nn::append_blocks(lg.grad, gb);
      fd_compare(p, copy_blocks(gb), [&] { return intrinsic::dynamics_loss_and_grad(model, batch).loss; },
                 "dynamics", st);
    }
    finish("dynamics", st);
  }

  {  // clipped PPO objective
    FdStats st;
    Rng rng = make_rng(seed, Stream::kInit, 104);
    for (int n = 0; n < kInstances; ++n, ++st.instances) {
      const auto dims = small_dims(rng);
      policy::AgentModel m = policy::make_agent_model(dims, rng(), 0.0);
      jitter_biases(m, rng);
      m.log_std = rand_matrix(dims.action_dim, 1, rng, 0.6);
      const int B = rand_int(rng, 1, 6);
      train::Minibatch mb;
      mb.x = rand_matrix(dims.x_dim, B, rng);
      mb.messages = rand_messages(dims, B, 8, rng);
      const auto agg = n % 2 ? policy::Aggregation::kMean : policy::Aggregation::kSum;
      const auto f0 = policy::policy_forward(m, mb.x, mb.messages.size() ? &mb.messages : nullptr, agg);
      mb.action = f0.mean() + rand_matrix(dims.action_dim, B, rng, 0.8);
      mb.old_log_prob.resize(B);
      for (int k = 0; k < B; ++k) {
        mb.old_log_prob[k] = nn::gaussian_log_prob(f0.mean().col(k), m.log_std, mb.action.col(k)) +
                             rand_real(rng, -0.4, 0.4);
      }
      mb.advantage = rand_matrix(B, 1, rng, 2.0);
      mb.target = rand_matrix(B, 1, rng, 2.0);
      PpoConfig cfg;
      policy::PolicyGrad g = policy::PolicyGrad::zeros_like(m);
      Matrix d_msg;
      train::ppo_loss_and_grad(m, mb, agg, cfg, g, &d_msg);
      if (mb.messages.size() == 0) d_msg = Matrix(dims.message_dim(), 0);
      nn::ParamBlocks p;
      nn::GradBlocks gb;
      policy::append_blocks(m, p);
      policy::append_blocks(g, gb);
      auto analytic = copy_blocks(gb);
      p.push_back(span_of(mb.messages.inputs));
      analytic.push_back(vec_of(d_msg));
      fd_compare(p, analytic,
                 [&] {
                   policy::PolicyGrad scratch = policy::PolicyGrad::zeros_like(m);
                   return train::ppo_loss_and_grad(m, mb, agg, cfg, scratch).total;
                 },
                 "ppo", st);
    }
    finish("ppo", st);
  }
  return report.str();
}

// ---------------------------------------------------------------------------
// 2. Neighbor permutation and global translation.

namespace detail {

inline double dyadic(Rng& rng, int range) { return rand_int(rng, -range, range) / 64.0; }

inline env::WorldState dyadic_world(const env::ScenarioSpec& spec, Rng& rng) {
  env::WorldState s;
  s.horizon = spec.horizon;
  for (int i = 0; i < spec.n_agents; ++i) {
    s.pos.emplace_back(dyadic(rng, 96), dyadic(rng, 96));
    s.vel.emplace_back(dyadic(rng, 40), dyadic(rng, 40));
  }
  for (int k = 0; k < spec.n_landmarks(); ++k) {
    s.landmarks.emplace_back(dyadic(rng, 96), dyadic(rng, 96));
    s.landmark_tags.push_back(k);
  }
  if (spec.kind == env::ScenarioKind::kFlocking) {
    for (int k = 0; k < spec.n_obstacles; ++k) {
      s.obstacles.emplace_back(dyadic(rng, 96), dyadic(rng, 96));
      s.obstacle_radius.push_back(0.125);
    }
  }
  s.contacts.assign(static_cast<std::size_t>(spec.n_agents), 0);
  return s;
}

inline env::WorldState translated(env::WorldState s, const env::Vec2& d) {
  for (auto& p : s.pos) p += d;
  for (auto& p : s.landmarks) p += d;
  for (auto& p : s.obstacles) p += d;
  return s;
}

inline train::EnvSlot slot_of(const env::ScenarioSpec& spec, const std::vector<env::AgentSpec>& agents,
                              env::WorldState s) {
  train::EnvSlot slot;
  slot.obs = env::observe_all(spec, s, agents);
  slot.graph = graph::build_comm_graph(s, agents, slot.obs);
  slot.state = std::move(s);
  return slot;
}

}  // namespace detail

inline std::string invariance_checks(std::uint64_t seed, bool& ok) {
  using namespace detail;
  Rng rng = make_rng(seed, Stream::kInit, 201);
  int instances = 0, messages = 0, perm_fail = 0, trans_fail = 0;
  const env::ScenarioKind kinds[] = {env::ScenarioKind::kNavigation, env::ScenarioKind::kSpread,
                                     env::ScenarioKind::kFlocking};
  for (int n = 0; n < 60; ++n, ++instances) {
    RunConfig cfg;
    cfg.scenario.kind = kinds[n % 3];
    cfg.scenario.n_agents = rand_int(rng, 2, 7);
    cfg.scenario.obs_radius = {1.0, 3.0};
    cfg.model.hidden_width = 16;
    cfg.model.d_z = 8;
    cfg.model.h_dim = 12;
    const auto agg = n % 2 ? policy::Aggregation::kMean : policy::Aggregation::kSum;
    const auto agents = env::draw_agents(cfg.scenario, rng());
    std::vector<policy::AgentModel> models;
    for (int i = 0; i < cfg.scenario.n_agents; ++i) {
      models.push_back(policy::make_agent_model(cfg.policy_dims(), rng(), -0.5));
    }
    const env::WorldState s = dyadic_world(cfg.scenario, rng);
    const env::Vec2 shift(dyadic(rng, 640), dyadic(rng, 640));
    const train::EnvSlot a = slot_of(cfg.scenario, agents, s);
    const train::EnvSlot b = slot_of(cfg.scenario, agents, translated(s, shift));

    const std::uint64_t sample_seed = rng();
    std::vector<Rng> ra, rb;
    for (std::size_t i = 0; i < models.size(); ++i) {
      ra.emplace_back(sample_seed + i);
      rb.emplace_back(sample_seed + i);
    }
    const auto ja = train::act(models, std::span(&a, 1), true, agg, &ra);
    const auto jb = train::act(models, std::span(&b, 1), true, agg, &rb);
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto fa = policy::policy_forward(models[i], ja.x[i], &ja.messages[i], agg);
      const auto fb = policy::policy_forward(models[i], jb.x[i], &jb.messages[i], agg);
      if (!same_bits(fa.h, fb.h) || !same_bits(ja.mean[i], jb.mean[i]) || !same_bits(ja.action[i], jb.action[i]) ||
          !same_bits(ja.value[i], jb.value[i])) {
        ++trans_fail;
      }
      // Shuffle the arrival order of agent i's messages.
      const auto& mb = ja.messages[i];
      messages += mb.size();
      std::vector<int> order(static_cast<std::size_t>(mb.size()));
      for (int k = 0; k < mb.size(); ++k) order[static_cast<std::size_t>(k)] = k;
      for (int rep = 0; rep < 3; ++rep) {
        std::shuffle(order.begin(), order.end(), rng);
        policy::MessageBatch pm;
        pm.inputs.resize(mb.inputs.rows(), mb.size());
        for (int k = 0; k < mb.size(); ++k) {
          pm.inputs.col(k) = mb.inputs.col(order[static_cast<std::size_t>(k)]);
          pm.target.push_back(mb.target[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
          pm.sender.push_back(mb.sender[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
        }
        const auto fp = policy::policy_forward(models[i], ja.x[i], &pm, agg);
        std::vector<Vector> zs;
        std::vector<graph::EdgeFeature> es;
        for (int k = 0; k < pm.size(); ++k) {
          zs.push_back(pm.inputs.col(k).head(cfg.model.d_z));
          es.push_back(pm.inputs.col(k).tail<graph::kEdgeDim>());
        }
        const Vector hp = policy::gnn_forward(models[i], fa.z().col(0), zs, es, agg);
        if (!same_bits(fp.h, fa.h) || !same_bits(hp, fa.h)) ++perm_fail;
      }
    }
  }
  ok = perm_fail == 0 && trans_fail == 0 && messages > 0;
  std::ostringstream os;
  os << instances << " worlds, " << messages << " messages; permutation mismatches " << perm_fail
     << ", translation mismatches " << trans_fail;
  return os.str();
}

// ---------------------------------------------------------------------------
// 3-4. Weighted intrinsic reward against a double-loop oracle.

namespace detail {

struct RewardInstance {
  std::vector<env::Vec2> pos_t, pos_t1, vel;
  std::vector<double> radius;
  std::vector<Vector> next_obs;
  std::vector<std::vector<Vector>> pred;  // pred[j][i]: j's forecast for i
  intrinsic::Norm norm = intrinsic::Norm::kL2;
};

inline RewardInstance rand_reward_instance(Rng& rng, bool exact_predictions) {
  RewardInstance r;
  const int N = rand_int(rng, 1, 8);
  const int d = rand_int(rng, 1, 6);
  r.norm = rand_int(rng, 0, 1) ? intrinsic::Norm::kL1 : intrinsic::Norm::kL2;
  for (int i = 0; i < N; ++i) {
    r.pos_t.emplace_back(rand_real(rng, -2, 2), rand_real(rng, -2, 2));
    r.pos_t1.push_back(r.pos_t.back() + env::Vec2(rand_real(rng, -0.3, 0.3), rand_real(rng, -0.3, 0.3)));
    r.vel.emplace_back(rand_real(rng, -1, 1), rand_real(rng, -1, 1));
    r.radius.push_back(rand_real(rng, 0.2, 2.5));
    r.next_obs.push_back(rand_matrix(d, 1, rng));
  }
  // Occasional coincident agents exercise the distance floor.
  if (N > 1 && rand_int(rng, 0, 9) == 0) r.pos_t[1] = r.pos_t[0];
  r.pred.assign(static_cast<std::size_t>(N), {});
  for (int j = 0; j < N; ++j) {
    for (int i = 0; i < N; ++i) {
      r.pred[static_cast<std::size_t>(j)].push_back(exact_predictions ? r.next_obs[static_cast<std::size_t>(i)]
                                                                      : Vector(rand_matrix(d, 1, rng)));
    }
  }
  return r;
}

// Straight transcription of the definition with explicit loops.
inline double oracle_reward(const RewardInstance& r, int i) {
  const std::size_t N = r.pos_t.size();
  const auto ui = static_cast<std::size_t>(i);
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    if (j == ui) continue;
    const double dx0 = r.pos_t[j].x() - r.pos_t[ui].x(), dy0 = r.pos_t[j].y() - r.pos_t[ui].y();
    const double dx1 = r.pos_t1[j].x() - r.pos_t1[ui].x(), dy1 = r.pos_t1[j].y() - r.pos_t1[ui].y();
    const double dist0 = std::sqrt(dx0 * dx0 + dy0 * dy0);
    const double dist1 = std::sqrt(dx1 * dx1 + dy1 * dy1);
    if (!(dist0 <= r.radius[ui] && dist1 <= r.radius[ui])) continue;
    const double inv = 1.0 / std::max(dist0, 1e-6);
    double err = 0.0;
    for (Eigen::Index k = 0; k < r.next_obs[ui].size(); ++k) {
      const double e = r.next_obs[ui][k] - r.pred[j][ui][k];
      err += r.norm == intrinsic::Norm::kL2 ? e * e : std::abs(e);
    }
    if (r.norm == intrinsic::Norm::kL2) err = std::sqrt(err);
    num += inv * err;
    den += inv;
  }
  return den > 0.0 ? -num / den : 0.0;
}

struct ImplReward {
  double r = 0.0;
  double weight_sum = 0.0;
  bool empty = true;
};

inline ImplReward impl_reward(const RewardInstance& r, int i) {
  const auto g_t = graph::build_comm_graph(r.pos_t, r.vel, r.radius, {});
  const auto g_t1 = graph::build_comm_graph(r.pos_t1, r.vel, r.radius, {});
  const auto J = graph::neighbor_sets(g_t, g_t1, i).both;
  ImplReward out;
  if (J.empty()) return out;
  out.empty = false;
  std::vector<env::Vec2> pj;
  std::vector<Vector> preds;
  for (int j : J) {
    pj.push_back(r.pos_t[static_cast<std::size_t>(j)]);
    preds.push_back(r.pred[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]);
  }
  const auto w = intrinsic::neighbor_weights(r.pos_t[static_cast<std::size_t>(i)], pj);
  for (double x : w) out.weight_sum += x;
  out.r = intrinsic::intrinsic_reward_team(r.next_obs[static_cast<std::size_t>(i)], preds, w, r.norm);
  return out;
}

}  // namespace detail

inline std::string reward_oracle_check(std::uint64_t seed, bool& ok) {
  Rng rng = make_rng(seed, Stream::kInit, 301);
  double worst = 0.0;
  int agents = 0, nonempty = 0;
  for (int n = 0; n < 1000; ++n) {
    const auto inst = detail::rand_reward_instance(rng, false);
    for (int i = 0; i < static_cast<int>(inst.pos_t.size()); ++i, ++agents) {
      const auto impl = detail::impl_reward(inst, i);
      nonempty += impl.empty ? 0 : 1;
      worst = std::max(worst, std::abs(impl.r - detail::oracle_reward(inst, i)));
    }
  }
  ok = worst <= 1e-12 && nonempty > 0;
  std::ostringstream os;
  os << "1000 instances, " << agents << " agents (" << nonempty << " with neighbors); max |impl - oracle| = "
     << worst;
  return os.str();
}

inline std::string weight_checks(std::uint64_t seed, bool& ok) {
  Rng rng = make_rng(seed, Stream::kInit, 401);
  double worst_sum = 0.0;
  int positive = 0, exact_nonzero = 0, empty_nonzero = 0, nonempty = 0, empties = 0;
  for (int n = 0; n < 2000; ++n) {
    const bool exact = n % 2 == 1;
    const auto inst = detail::rand_reward_instance(rng, exact);
    for (int i = 0; i < static_cast<int>(inst.pos_t.size()); ++i) {
      const auto impl = detail::impl_reward(inst, i);
      if (impl.empty) {
        ++empties;
        if (impl.r != 0.0) ++empty_nonzero;
        continue;
      }
      ++nonempty;
      worst_sum = std::max(worst_sum, std::abs(impl.weight_sum - 1.0));
      if (impl.r > 0.0) ++positive;
      if (exact && impl.r != 0.0) ++exact_nonzero;
    }
  }
  // Rollout-level: with no neighbors at all, or a single agent, r_int is 0.
  int rollout_nonzero = 0;
  for (int variant = 0; variant < 2; ++variant) {
    RunConfig cfg;
    cfg.algo.mode = AlgoMode::kCohetTeam;
    cfg.run.n_envs = 3;
    cfg.ppo.train_batch_size = 60;
    if (variant == 0) {
      cfg.scenario.obs_radius = {1e-3, 1e-3};
    } else {
      cfg.scenario.n_agents = 1;
    }
    train::Trainer t(cfg, seed);
    const auto b = t.collect_rollout(20);
    for (const auto& tr : b.agents) {
      for (const auto& rec : tr.rewards) rollout_nonzero += rec.r_int != 0.0 ? 1 : 0;
    }
  }
  ok = worst_sum <= 1e-12 && positive == 0 && exact_nonzero == 0 && empty_nonzero == 0 && rollout_nonzero == 0 &&
       nonempty > 0 && empties > 0;
  std::ostringstream os;
  os << nonempty << " non-empty / " << empties << " empty intersections; max |sum w - 1| = " << worst_sum
     << "; r_int > 0: " << positive << "; nonzero on exact predictions: " << exact_nonzero
     << "; nonzero on empty sets: " << empty_nonzero << "; nonzero in isolated rollouts: " << rollout_nonzero;
  return os.str();
}

// ---------------------------------------------------------------------------
// 5. Mode lattice.

namespace detail {

inline RunConfig small_config(AlgoMode mode, double beta) {
  RunConfig c;
  c.algo.mode = mode;
  c.algo.beta = beta;
  c.scenario.horizon = 25;
  c.run.n_envs = 4;
  c.ppo.train_batch_size = 200;
  c.ppo.minibatch_size = 64;
  c.ppo.epochs = 2;
  c.run.iterations = 3;
  c.run.checkpoint_every = 2;
  return c;
}

inline bool same_batches(const train::TrajectoryBatch& a, const train::TrajectoryBatch& b) {
  if (a.size() != b.size() || a.n_agents != b.n_agents || a.done != b.done) return false;
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    const auto& x = a.agents[i];
    const auto& y = b.agents[i];
    if (!same_bits(x.obs, y.obs) || !same_bits(x.action, y.action) || !same_bits(x.next_obs, y.next_obs) ||
        !same_bits(x.log_prob, y.log_prob) || !same_bits(x.value, y.value) ||
        !same_bits(x.messages.inputs, y.messages.inputs)) {
      return false;
    }
    for (std::size_t k = 0; k < x.rewards.size(); ++k) {
      const auto& p = x.rewards[k];
      const auto& q = y.rewards[k];
      if (std::memcmp(&p.r_ext, &q.r_ext, sizeof(double)) || std::memcmp(&p.r_int, &q.r_int, sizeof(double)) ||
          std::memcmp(&p.r_total, &q.r_total, sizeof(double))) {
        return false;
      }
    }
  }
  return true;
}

}  // namespace detail

inline std::string mode_lattice_check(std::uint64_t seed, bool& ok) {
  train::Trainer zero(detail::small_config(AlgoMode::kCohetTeam, 0.0), seed);
  train::Trainer base(detail::small_config(AlgoMode::kBaseline, 0.01), seed);
  int batch_mismatch = 0, row_mismatch = 0;
  const int iters = 3;
  for (int k = 0; k < iters; ++k) {
    train::TrajectoryBatch ba, bb;
    const auto ma = zero.iterate(&ba);
    const auto mb = base.iterate(&bb);
    if (!detail::same_batches(ba, bb)) ++batch_mismatch;
    if (metrics::format_row(ma) != metrics::format_row(mb)) ++row_mismatch;
  }
  RunConfig solo = detail::small_config(AlgoMode::kCohetTeam, 0.1);
  solo.scenario.n_agents = 1;
  train::Trainer one(solo, seed);
  int solo_nonzero = 0;
  for (int k = 0; k < 2; ++k) {
    train::TrajectoryBatch b;
    const auto m = one.iterate(&b);
    for (const auto& rec : b.agents[0].rewards) solo_nonzero += rec.r_int != 0.0 ? 1 : 0;
    solo_nonzero += m.intrinsic_reward_mean[0] != 0.0 ? 1 : 0;
  }
  ok = batch_mismatch == 0 && row_mismatch == 0 && solo_nonzero == 0;
  std::ostringstream os;
  os << "beta=0 team vs baseline over " << iters << " iterations: " << batch_mismatch << " batch and " << row_mismatch
     << " metrics-row mismatches; single-agent nonzero r_int samples: " << solo_nonzero;
  return os.str();
}

// ---------------------------------------------------------------------------
// 6. Determinism of full runs.

namespace detail {

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::string determinism_check(std::uint64_t seed, const std::string& work_dir, bool& ok) {
  namespace fs = std::filesystem;
  struct Variant {
    const char* name;
    RunConfig cfg;
  };
  std::vector<Variant> variants{
      {"cohet_team", detail::small_config(AlgoMode::kCohetTeam, 0.01)},
      {"cohet_self", detail::small_config(AlgoMode::kCohetSelf, 0.01)},
      {"baseline", detail::small_config(AlgoMode::kBaseline, 0.0)},
      {"ippo", detail::small_config(AlgoMode::kIppo, 0.0)},
      {"cohet_team_backprop", detail::small_config(AlgoMode::kCohetTeam, 0.01)},
  };
  variants[4].cfg.algo.backprop_through_comm = true;
  variants[4].cfg.scenario.kind = env::ScenarioKind::kFlocking;
  int differ = 0;
  std::string which;
  for (const auto& v : variants) {
    const std::string a = (fs::path(work_dir) / v.name / "a").string();
    const std::string b = (fs::path(work_dir) / v.name / "b").string();
    run::train_run(v.cfg, seed, a, true);
    run::train_run(v.cfg, seed, b, true);
    bool same = detail::slurp(fs::path(a) / "metrics.csv") == detail::slurp(fs::path(b) / "metrics.csv");
    const auto ck = fs::path("checkpoints") / ("iter_" + std::to_string(v.cfg.run.iterations) + ".ckpt");
    same = same && detail::slurp(fs::path(a) / ck) == detail::slurp(fs::path(b) / ck);
    if (!same) {
      ++differ;
      which += std::string(" ") + v.name;
    }
  }
  ok = differ == 0;
  std::ostringstream os;
  os << variants.size() << " configurations run twice; differing metrics/checkpoints: " << differ << which;
  return os.str();
}

// ---------------------------------------------------------------------------
// 7. GAE against direct summation.

namespace detail {

// A_t = sum_k (gamma lambda)^k delta_{t+k}, truncated after the step that
// ends the episode.
inline double gae_oracle(const std::vector<double>& r, const std::vector<double>& v,
                         const std::vector<std::uint8_t>& done, double bootstrap, double gamma, double lambda,
                         std::size_t t) {
  double total = 0.0;
  double coef = 1.0;
  for (std::size_t k = t; k < r.size(); ++k) {
    const double v_next = k + 1 < r.size() ? v[k + 1] : bootstrap;
    const double delta = r[k] + (done[k] ? 0.0 : gamma * v_next) - v[k];
    total += coef * delta;
    if (done[k]) break;
    coef *= gamma * lambda;
  }
  return total;
}

}  // namespace detail

inline std::string gae_check(std::uint64_t seed, bool& ok) {
  Rng rng = make_rng(seed, Stream::kInit, 701);
  double worst = 0.0;
  // Traces are packed into a batch of E environments so compute_gae's layout
  // handling is exercised too.
  for (int n = 0; n < 100; ++n) {
    const int E = detail::rand_int(rng, 1, 3);
    const int S = detail::rand_int(rng, 1, 40);
    const double gamma = n == 0 ? 1.0 : detail::rand_real(rng, 0.0, 1.0);
    const double lambda = n == 0 ? 1.0 : detail::rand_real(rng, 0.0, 1.0);
    train::TrajectoryBatch b;
    b.n_agents = 1;
    b.n_envs = E;
    b.steps = S;
    b.agents.resize(1);
    b.agents[0].value.resize(S * E);
    b.agents[0].rewards.resize(static_cast<std::size_t>(S * E));
    b.done.resize(static_cast<std::size_t>(S * E));
    b.bootstrap_value.resize(1, E);
    for (int k = 0; k < S * E; ++k) {
      b.agents[0].value[k] = detail::rand_real(rng, -2, 2);
      b.agents[0].rewards[static_cast<std::size_t>(k)] = intrinsic::mix_rewards(detail::rand_real(rng, -1, 1), 0.0, 0.0);
      b.done[static_cast<std::size_t>(k)] = detail::rand_int(rng, 0, 9) == 0;
    }
    for (int e = 0; e < E; ++e) b.bootstrap_value(0, e) = detail::rand_real(rng, -2, 2);
    const auto g = train::compute_gae(b, gamma, lambda);
    for (int e = 0; e < E; ++e) {
      std::vector<double> r, v;
      std::vector<std::uint8_t> d;
      for (int s = 0; s < S; ++s) {
        r.push_back(b.agents[0].rewards[static_cast<std::size_t>(s * E + e)].r_total);
        v.push_back(b.agents[0].value[s * E + e]);
        d.push_back(b.done[static_cast<std::size_t>(s * E + e)]);
      }
      for (int s = 0; s < S; ++s) {
        const double o = detail::gae_oracle(r, v, d, b.bootstrap_value(0, e), gamma, lambda, static_cast<std::size_t>(s));
        worst = std::max(worst, std::abs(g[0].advantages[s * E + e] - o));
        worst = std::max(worst, std::abs(g[0].targets[s * E + e] - (o + v[static_cast<std::size_t>(s)])));
      }
    }
  }
  ok = worst <= 1e-10;
  std::ostringstream os;
  os << "100 random traces; max |gae - direct sum| = " << worst;
  return os.str();
}

// ---------------------------------------------------------------------------

struct Options {
  std::uint64_t seed = 0;
  std::string work_dir;  // scratch space for the determinism runs
};

inline std::vector<CheckResult> run_all(const Options& opt,
                                        const std::function<void(const CheckResult&)>& on_result = {}) {
  using Fn = std::function<std::string(bool&)>;
  struct Spec {
    int id;
    const char* name;
    double budget;
    Fn fn;
  };
  const std::string work = opt.work_dir.empty()
                               ? (std::filesystem::temp_directory_path() / "cohet-selftest").string()
                               : opt.work_dir;
  const std::vector<Spec> specs{
      {1, "gradient checks vs central differences", 60, [&](bool& ok) { return gradient_checks(opt.seed, ok); }},
      {2, "neighbor permutation and translation invariance", 10,
       [&](bool& ok) { return invariance_checks(opt.seed, ok); }},
      {3, "intrinsic reward vs brute-force oracle", 10, [&](bool& ok) { return reward_oracle_check(opt.seed, ok); }},
      {4, "weight normalization and reward sign", 10, [&](bool& ok) { return weight_checks(opt.seed, ok); }},
      {5, "mode lattice", 120, [&](bool& ok) { return mode_lattice_check(opt.seed, ok); }},
      {6, "run determinism", 120, [&](bool& ok) { return determinism_check(opt.seed, work, ok); }},
      {7, "GAE vs direct summation", 10, [&](bool& ok) { return gae_check(opt.seed, ok); }},
  };
  std::vector<CheckResult> out;
  for (const auto& s : specs) {
    CheckResult r;
    r.id = s.id;
    r.name = s.name;
    r.budget_seconds = s.budget;
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      r.detail = s.fn(ok);
    } catch (const std::exception& e) {
      ok = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.passed = ok && r.seconds < r.budget_seconds;
    if (ok && !r.passed) r.detail += "; exceeded time budget";
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  }
  std::filesystem::remove_all(work);
  return out;
}

inline std::string format_result(const CheckResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, " (%.2fs / %.0fs)", r.seconds, r.budget_seconds);
  return std::string(r.passed ? "PASS" : "FAIL") + " criterion " + std::to_string(r.id) + " " + r.name + ": " +
         r.detail + buf;
}

}  // namespace cohet::selftest
