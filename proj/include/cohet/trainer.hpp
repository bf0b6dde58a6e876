#pragma once

// Rollout collection, generalized advantage estimation and per-agent clipped
// PPO. One rollout step runs, for every environment instance and agent:
//
//   trim -> encode -> message passing -> decode action/value -> env step
//   -> neighbor predictions from step t -> weighted intrinsic reward
//   -> r_total = r_ext + beta * r_int -> append to the batch
//
// after which every agent's dynamics model takes one step on its own replay.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohet/config.hpp"
#include "cohet/env.hpp"
#include "cohet/graph.hpp"
#include "cohet/intrinsic.hpp"
#include "cohet/nn.hpp"
#include "cohet/parallel.hpp"
#include "cohet/policy.hpp"
#include "cohet/rng.hpp"

namespace cohet::train {

using nn::Matrix;
using nn::Vector;

inline bool uses_graph(AlgoMode m) { return m != AlgoMode::kIppo; }
inline bool uses_dynamics(AlgoMode m) { return m != AlgoMode::kIppo; }
// The baseline still trains dynamics models and measures r_int, but with
// beta forced to zero, so it stays trajectory-identical to beta = 0 runs.
inline double effective_beta(const AlgoConfig& a) { return a.mode == AlgoMode::kBaseline ? 0.0 : a.beta; }

// ---------------------------------------------------------------------------
// Generalized advantage estimation

struct GaeResult {
  Vector advantages;
  Vector targets;  // advantage + value
};

// One environment's trace. done[t] marks the last step of an episode;
// `bootstrap` is V(s_T) used when the trace ends mid-episode.
inline void gae_trace(std::span<const double> rewards, std::span<const double> values,
                      std::span<const std::uint8_t> done, double bootstrap, double gamma, double lambda,
                      std::span<double> advantages) {
  const std::size_t n = rewards.size();
  double next_adv = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double next_value = (k + 1 == n) ? bootstrap : values[k + 1];
    const double nonterminal = done[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * nonterminal - values[k];
    next_adv = delta + gamma * lambda * nonterminal * next_adv;
    advantages[k] = next_adv;
  }
}

inline Vector normalize_advantages(const Vector& a) {
  if (a.size() == 0) return a;
  const double mean = a.mean();
  const double var = (a.array() - mean).square().mean();
  const double std = std::max(std::sqrt(var), 1e-8);
  return ((a.array() - mean) / std).matrix();
}

// ---------------------------------------------------------------------------
// Trajectory storage. Sample index = step * n_envs + env.

struct AgentTrajectory {
  Matrix obs;
  Matrix x;
  Matrix action;   // sampled
  Matrix applied;  // force after the max_force clamp
  Matrix next_obs;
  Vector log_prob;
  Vector value;
  std::vector<intrinsic::RewardRecord> rewards;
  policy::MessageBatch messages;  // target = sample index
  std::vector<int> msg_offset;    // messages of sample s: [msg_offset[s], msg_offset[s+1])
  // Neighbors whose predictions entered r_int for each sample.
  std::vector<std::vector<int>> predictors;
};

struct TrajectoryBatch {
  int n_agents = 0;
  int n_envs = 0;
  int steps = 0;
  std::vector<AgentTrajectory> agents;
  std::vector<std::uint8_t> done;
  std::vector<graph::CommGraph> graph_t;
  std::vector<graph::CommGraph> graph_t1;
  Matrix bootstrap_value;  // n_agents x n_envs

  int size() const { return steps * n_envs; }
};

inline std::vector<GaeResult> compute_gae(const TrajectoryBatch& b, double gamma, double lambda) {
  std::vector<GaeResult> out(static_cast<std::size_t>(b.n_agents));
  const int E = b.n_envs;
  const int S = b.steps;
  std::vector<double> r(static_cast<std::size_t>(S)), v(static_cast<std::size_t>(S)),
      adv(static_cast<std::size_t>(S));
  std::vector<std::uint8_t> d(static_cast<std::size_t>(S));
  for (int i = 0; i < b.n_agents; ++i) {
    const AgentTrajectory& tr = b.agents[static_cast<std::size_t>(i)];
    GaeResult& g = out[static_cast<std::size_t>(i)];
    g.advantages.resize(b.size());
    g.targets.resize(b.size());
    for (int e = 0; e < E; ++e) {
      for (int s = 0; s < S; ++s) {
        const int k = s * E + e;
        r[static_cast<std::size_t>(s)] = tr.rewards[static_cast<std::size_t>(k)].r_total;
        v[static_cast<std::size_t>(s)] = tr.value[k];
        d[static_cast<std::size_t>(s)] = b.done[static_cast<std::size_t>(k)];
      }
      gae_trace(r, v, d, b.bootstrap_value(i, e), gamma, lambda, adv);
      for (int s = 0; s < S; ++s) {
        const int k = s * E + e;
        g.advantages[k] = adv[static_cast<std::size_t>(s)];
        g.targets[k] = adv[static_cast<std::size_t>(s)] + tr.value[k];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clipped PPO loss for one agent on one minibatch.

struct PpoLosses {
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

struct Minibatch {
  Matrix x;
  policy::MessageBatch messages;
  std::vector<int> columns;  // batch sample index of each minibatch column
  Matrix action;
  Vector old_log_prob;
  Vector advantage;
  Vector target;
};

// loss = -mean(min(rho A, clip(rho) A)) + c_v mean((V - target)^2) - c_e H.
// Gradients are accumulated into `g`. When `d_messages` is given it receives
// the gradient with respect to the message inputs.
inline PpoLosses ppo_loss_and_grad(const policy::AgentModel& m, const Minibatch& mb,
                                   policy::Aggregation agg, const PpoConfig& cfg,
                                   policy::PolicyGrad& g, Matrix* d_messages = nullptr) {
  const Eigen::Index B = mb.x.cols();
  if (B == 0) throw std::invalid_argument("ppo_loss_and_grad: empty minibatch");
  const policy::MessageBatch* msgs = mb.messages.size() > 0 ? &mb.messages : nullptr;
  const policy::PolicyForward f = policy::policy_forward(m, mb.x, msgs, agg);
  const Vector log_std = nn::clamp_log_std(m.log_std);
  const Vector inv_std = (-log_std).array().exp().matrix();
  const Vector inv_var = (-2.0 * log_std).array().exp().matrix();
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double inv_b = 1.0 / static_cast<double>(B);

  Matrix d_mean = Matrix::Zero(m.pi_decoder.output_dim(), B);
  Matrix d_value(1, B);
  Vector d_log_std = Vector::Zero(log_std.size());
  PpoLosses L;
  for (Eigen::Index k = 0; k < B; ++k) {
    double lp = 0.0;
    for (Eigen::Index a = 0; a < log_std.size(); ++a) {
      const double z = (mb.action(a, k) - f.mean()(a, k)) * inv_std[a];
      lp += -0.5 * z * z - log_std[a] - half_log_2pi;
    }
    const double rho = std::exp(lp - mb.old_log_prob[k]);
    const double A = mb.advantage[k];
    const double clipped = std::clamp(rho, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    const double s1 = rho * A;
    const double s2 = clipped * A;
    L.policy -= std::min(s1, s2) * inv_b;
    if (s1 <= s2) {
      const double d_lp = -rho * A * inv_b;
      for (Eigen::Index a = 0; a < log_std.size(); ++a) {
        const double diff = mb.action(a, k) - f.mean()(a, k);
        d_mean(a, k) = d_lp * diff * inv_var[a];
        d_log_std[a] += d_lp * (diff * diff * inv_var[a] - 1.0);
      }
    }
    const double verr = f.values()(0, k) - mb.target[k];
    L.value += verr * verr * inv_b;
    d_value(0, k) = cfg.value_coef * 2.0 * verr * inv_b;
  }
  L.entropy = nn::gaussian_entropy(log_std);
  d_log_std.array() -= cfg.entropy_coef;  // dH/dlog_std = 1 per dimension
  L.total = L.policy + cfg.value_coef * L.value - cfg.entropy_coef * L.entropy;
  if (!std::isfinite(L.total)) {
    std::ostringstream os;
    os << "non-finite PPO loss (policy=" << L.policy << ", value=" << L.value
       << ", log_std=" << log_std.transpose() << ")";
    throw std::runtime_error(os.str());
  }
  Matrix d_msg = policy::policy_backward(m, f, agg, d_mean, d_value, g);
  g.log_std += d_log_std;
  if (d_messages) *d_messages = std::move(d_msg);
  return L;
}

inline Minibatch gather_minibatch(const AgentTrajectory& tr, const Vector& advantages,
                                  const Vector& targets, std::span<const int> cols) {
  Minibatch mb;
  const auto B = static_cast<Eigen::Index>(cols.size());
  mb.columns.assign(cols.begin(), cols.end());
  mb.x.resize(tr.x.rows(), B);
  mb.action.resize(tr.action.rows(), B);
  mb.old_log_prob.resize(B);
  mb.advantage.resize(B);
  mb.target.resize(B);
  int n_msgs = 0;
  for (int c : cols) n_msgs += tr.msg_offset[static_cast<std::size_t>(c) + 1] - tr.msg_offset[static_cast<std::size_t>(c)];
  mb.messages.inputs.resize(tr.messages.inputs.rows(), n_msgs);
  int m = 0;
  for (Eigen::Index k = 0; k < B; ++k) {
    const int c = cols[static_cast<std::size_t>(k)];
    mb.x.col(k) = tr.x.col(c);
    mb.action.col(k) = tr.action.col(c);
    mb.old_log_prob[k] = tr.log_prob[c];
    mb.advantage[k] = advantages[c];
    mb.target[k] = targets[c];
    for (int q = tr.msg_offset[static_cast<std::size_t>(c)]; q < tr.msg_offset[static_cast<std::size_t>(c) + 1]; ++q) {
      mb.messages.inputs.col(m++) = tr.messages.inputs.col(q);
      mb.messages.target.push_back(static_cast<int>(k));
      mb.messages.sender.push_back(tr.messages.sender[static_cast<std::size_t>(q)]);
    }
  }
  return mb;
}

// ---------------------------------------------------------------------------
// Evaluation-friendly joint forward pass over vectorized environments.

struct EnvSlot {
  env::WorldState state;
  std::vector<env::Observation> obs;
  graph::CommGraph graph;
  double episode_return = 0.0;
  std::vector<double> agent_return;
  std::uint64_t episodes_started = 0;
};

struct JointAction {
  std::vector<Matrix> x;
  std::vector<policy::MessageBatch> messages;  // target = env index
  std::vector<Matrix> mean;
  std::vector<Matrix> action;
  std::vector<Vector> log_prob;
  std::vector<Vector> value;
};

// `rngs == nullptr` is deterministic mode (action = mean).
inline JointAction act(const std::vector<policy::AgentModel>& models, std::span<const EnvSlot> envs,
                       bool use_graph, policy::Aggregation agg, std::vector<Rng>* rngs) {
  const int N = static_cast<int>(models.size());
  const auto E = static_cast<Eigen::Index>(envs.size());
  JointAction ja;
  ja.x.resize(static_cast<std::size_t>(N));
  ja.messages.resize(static_cast<std::size_t>(N));
  ja.mean.resize(static_cast<std::size_t>(N));
  ja.action.resize(static_cast<std::size_t>(N));
  ja.log_prob.resize(static_cast<std::size_t>(N));
  ja.value.resize(static_cast<std::size_t>(N));
  std::vector<Matrix> z(static_cast<std::size_t>(N));

  parallel_for(N, [&](int i) {
    const auto ui = static_cast<std::size_t>(i);
    Matrix x(models[ui].omega.input_dim(), E);
    for (Eigen::Index e = 0; e < E; ++e) x.col(e) = graph::trim_observation(envs[static_cast<std::size_t>(e)].obs[ui]);
    z[ui] = nn::mlp_apply(models[ui].omega, x);
    ja.x[ui] = std::move(x);
  });

  parallel_for(N, [&](int i) {
    const auto ui = static_cast<std::size_t>(i);
    const policy::AgentModel& m = models[ui];
    policy::MessageBatch& mb = ja.messages[ui];
    if (use_graph) {
      int count = 0;
      for (Eigen::Index e = 0; e < E; ++e) count += static_cast<int>(envs[static_cast<std::size_t>(e)].graph.edges_of(i).size());
      mb.inputs.resize(m.phi.input_dim(), count);
      int c = 0;
      for (Eigen::Index e = 0; e < E; ++e) {
        const graph::CommGraph& g = envs[static_cast<std::size_t>(e)].graph;
        const int base = g.offsets[ui];
        const auto edges = g.edges_of(i);
        for (std::size_t q = 0; q < edges.size(); ++q) {
          const int j = edges[q].to;
          mb.inputs.col(c) << z[static_cast<std::size_t>(j)].col(e),
              g.edge_features[static_cast<std::size_t>(base) + q];
          mb.target.push_back(static_cast<int>(e));
          mb.sender.push_back(j);
          ++c;
        }
      }
    }
    const policy::PolicyForward f =
        policy::policy_forward(m, ja.x[ui], use_graph ? &mb : nullptr, agg);
    ja.mean[ui] = f.mean();
    ja.value[ui] = f.values().row(0).transpose();
    if (!ja.mean[ui].allFinite() || !ja.value[ui].allFinite()) {
      throw std::runtime_error("non-finite policy output for agent " + std::to_string(i) +
                               "; aborting rollout");
    }
    Matrix action = ja.mean[ui];
    Vector lp(E);
    for (Eigen::Index e = 0; e < E; ++e) {
      const Vector mean_e = ja.mean[ui].col(e);
      if (rngs) action.col(e) = nn::gaussian_sample(mean_e, m.log_std, (*rngs)[ui]);
      lp[e] = nn::gaussian_log_prob(mean_e, m.log_std, action.col(e));
    }
    ja.action[ui] = std::move(action);
    ja.log_prob[ui] = std::move(lp);
  });
  return ja;
}

inline env::Vec2 clamp_force(const env::Vec2& f, double max_force) {
  const double n = f.norm();
  return n > max_force ? env::Vec2(f * (max_force / n)) : f;
}

// ---------------------------------------------------------------------------

struct IterationMetrics {
  int iteration = 0;
  long long env_steps = 0;
  double episodic_reward_mean = std::numeric_limits<double>::quiet_NaN();
  double episodic_reward_min = std::numeric_limits<double>::quiet_NaN();
  double episodic_reward_max = std::numeric_limits<double>::quiet_NaN();
  int episodes = 0;
  std::vector<double> intrinsic_reward_mean;
  std::vector<double> dynamics_loss;
  std::vector<double> policy_loss;
  std::vector<double> value_loss;
};

struct RolloutMetrics {
  std::vector<double> episode_returns;
  std::vector<double> intrinsic_reward_mean;
  std::vector<double> dynamics_loss;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    validate(cfg_);
    const auto& sc = cfg_.scenario;
    agents_ = env::draw_agents(sc, seed_);
    const int N = sc.n_agents;
    const auto dims = cfg_.policy_dims();
    for (int i = 0; i < N; ++i) {
      const auto ui = static_cast<std::uint64_t>(i);
      models_.push_back(policy::make_agent_model(dims, derive_seed(seed_, Stream::kInit, ui, 0),
                                                 cfg_.model.init_log_std));
      policy_opt_.emplace_back(nn::AdamConfig{cfg_.ppo.learning_rate, 0.9, 0.999, 1e-8});
      dynamics_.push_back(intrinsic::make_dynamics_model(
          i, env::obs_dim(sc), env::kActionDim, cfg_.algo.dynamics_hidden,
          static_cast<std::size_t>(cfg_.algo.replay_capacity),
          nn::AdamConfig{cfg_.algo.dynamics_lr, 0.9, 0.999, 1e-8},
          derive_seed(seed_, Stream::kInit, ui, 1)));
      policy_rng_.push_back(make_rng(seed_, Stream::kPolicy, ui));
      dynamics_rng_.push_back(make_rng(seed_, Stream::kDynamics, ui));
      minibatch_rng_.push_back(make_rng(seed_, Stream::kMinibatch, ui));
    }
    joint_rng_ = make_rng(seed_, Stream::kMinibatch, 1u << 20);
    envs_.resize(static_cast<std::size_t>(cfg_.run.n_envs));
    for (int e = 0; e < cfg_.run.n_envs; ++e) reset_env(e);
  }

  const RunConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<env::AgentSpec>& agents() const { return agents_; }
  const std::vector<policy::AgentModel>& models() const { return models_; }
  std::vector<policy::AgentModel>& models() { return models_; }
  const std::vector<intrinsic::DynamicsModel>& dynamics() const { return dynamics_; }
  std::vector<intrinsic::DynamicsModel>& dynamics() { return dynamics_; }
  int iteration() const { return iteration_; }
  long long env_steps() const { return env_steps_; }

  TrajectoryBatch collect_rollout(int steps, RolloutMetrics* metrics = nullptr) {
    const auto& sc = cfg_.scenario;
    const int N = sc.n_agents;
    const int E = static_cast<int>(envs_.size());
    const AlgoMode mode = cfg_.algo.mode;
    const double beta = effective_beta(cfg_.algo);
    const bool graph_on = uses_graph(mode);
    const bool dyn_on = uses_dynamics(mode);
    const int od = env::obs_dim(sc);
    const int S = std::max(steps, 0);
    const int total = S * E;

    TrajectoryBatch b;
    b.n_agents = N;
    b.n_envs = E;
    b.steps = S;
    b.done.assign(static_cast<std::size_t>(total), 0);
    b.graph_t.resize(static_cast<std::size_t>(total));
    b.graph_t1.resize(static_cast<std::size_t>(total));
    b.agents.resize(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
      AgentTrajectory& tr = b.agents[static_cast<std::size_t>(i)];
      tr.obs.resize(od, total);
      tr.x.resize(env::task_dim(sc), total);
      tr.action.resize(env::kActionDim, total);
      tr.applied.resize(env::kActionDim, total);
      tr.next_obs.resize(od, total);
      tr.log_prob.resize(total);
      tr.value.resize(total);
      tr.rewards.resize(static_cast<std::size_t>(total));
      tr.messages.inputs.resize(models_[static_cast<std::size_t>(i)].phi.input_dim(), 0);
      tr.msg_offset.assign(1, 0);
      tr.predictors.resize(static_cast<std::size_t>(total));
    }
    std::vector<std::vector<Vector>> msg_cols(static_cast<std::size_t>(N));

    RolloutMetrics local;
    RolloutMetrics& rm = metrics ? *metrics : local;
    rm = RolloutMetrics{};
    rm.intrinsic_reward_mean.assign(static_cast<std::size_t>(N), 0.0);
    rm.dynamics_loss.assign(static_cast<std::size_t>(N), 0.0);
    std::vector<int> dyn_updates(static_cast<std::size_t>(N), 0);

    for (int s = 0; s < S; ++s) {
      JointAction ja = act(models_, envs_, graph_on, cfg_.algo.aggregation, &policy_rng_);

      std::vector<env::StepResult> results(static_cast<std::size_t>(E));
      std::vector<graph::CommGraph> next_graphs(static_cast<std::size_t>(E));
      std::vector<std::vector<env::Vec2>> applied(static_cast<std::size_t>(E));
      for (int e = 0; e < E; ++e) {
        auto& forces = applied[static_cast<std::size_t>(e)];
        for (int i = 0; i < N; ++i) {
          const env::Vec2 a = ja.action[static_cast<std::size_t>(i)].col(e);
          forces.push_back(clamp_force(a, agents_[static_cast<std::size_t>(i)].max_force));
        }
        EnvSlot& slot = envs_[static_cast<std::size_t>(e)];
        results[static_cast<std::size_t>(e)] = env::step(sc, agents_, slot.state, forces);
        const auto& r = results[static_cast<std::size_t>(e)];
        next_graphs[static_cast<std::size_t>(e)] = graph::build_comm_graph(r.state, agents_, r.observations);
      }

      // Intrinsic rewards from predictions made at step t.
      std::vector<std::vector<double>> r_int(static_cast<std::size_t>(E),
                                             std::vector<double>(static_cast<std::size_t>(N), 0.0));
      std::vector<std::vector<std::vector<int>>> used(
          static_cast<std::size_t>(E), std::vector<std::vector<int>>(static_cast<std::size_t>(N)));
      if (dyn_on) {
        const bool self_mode = mode == AlgoMode::kCohetSelf;
        struct Request {
          int env, agent;
        };
        std::vector<std::vector<Request>> requests(static_cast<std::size_t>(N));
        for (int e = 0; e < E; ++e) {
          for (int i = 0; i < N; ++i) {
            auto& u = used[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
            if (self_mode) {
              u = {i};
            } else {
              u = graph::neighbor_sets(envs_[static_cast<std::size_t>(e)].graph,
                                       next_graphs[static_cast<std::size_t>(e)], i)
                      .both;
            }
            for (int j : u) requests[static_cast<std::size_t>(j)].push_back({e, i});
          }
        }
        std::vector<Matrix> preds(static_cast<std::size_t>(N));
        parallel_for(N, [&](int j) {
          const auto& req = requests[static_cast<std::size_t>(j)];
          if (req.empty()) return;
          Matrix in(od + env::kActionDim, static_cast<Eigen::Index>(req.size()));
          for (std::size_t q = 0; q < req.size(); ++q) {
            const auto& rq = req[q];
            in.col(static_cast<Eigen::Index>(q))
                << envs_[static_cast<std::size_t>(rq.env)].obs[static_cast<std::size_t>(rq.agent)].flat(),
                applied[static_cast<std::size_t>(rq.env)][static_cast<std::size_t>(rq.agent)];
          }
          preds[static_cast<std::size_t>(j)] = intrinsic::predict_next_batch(dynamics_[static_cast<std::size_t>(j)], in);
        });
        std::vector<std::size_t> cursor(static_cast<std::size_t>(N), 0);
        // Predictions were requested in (env, agent) order per predictor; read
        // them back in the same order.
        std::vector<std::vector<std::vector<Vector>>> pred_of(
            static_cast<std::size_t>(E), std::vector<std::vector<Vector>>(static_cast<std::size_t>(N)));
        for (int e = 0; e < E; ++e) {
          for (int i = 0; i < N; ++i) {
            for (int j : used[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)]) {
              pred_of[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)].push_back(
                  preds[static_cast<std::size_t>(j)].col(static_cast<Eigen::Index>(cursor[static_cast<std::size_t>(j)]++)));
            }
          }
        }
        for (int e = 0; e < E; ++e) {
          const EnvSlot& slot = envs_[static_cast<std::size_t>(e)];
          for (int i = 0; i < N; ++i) {
            const auto& u = used[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
            if (u.empty()) continue;
            const Vector actual = results[static_cast<std::size_t>(e)].observations[static_cast<std::size_t>(i)].flat();
            const auto& p = pred_of[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)];
            double r = 0.0;
            if (self_mode) {
              r = intrinsic::intrinsic_reward_self(actual, p[0], cfg_.algo.norm);
            } else {
              std::vector<env::Vec2> pj;
              for (int j : u) pj.push_back(slot.state.pos[static_cast<std::size_t>(j)]);
              const auto w = intrinsic::neighbor_weights(slot.state.pos[static_cast<std::size_t>(i)], pj);
              r = intrinsic::intrinsic_reward_team(actual, p, w, cfg_.algo.norm);
            }
            r_int[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)] = r;
          }
        }
      }

      // Record.
      for (int e = 0; e < E; ++e) {
        const int k = s * E + e;
        EnvSlot& slot = envs_[static_cast<std::size_t>(e)];
        const env::StepResult& res = results[static_cast<std::size_t>(e)];
        b.done[static_cast<std::size_t>(k)] = res.done ? 1 : 0;
        b.graph_t[static_cast<std::size_t>(k)] = slot.graph;
        b.graph_t1[static_cast<std::size_t>(k)] = next_graphs[static_cast<std::size_t>(e)];
        for (int i = 0; i < N; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          AgentTrajectory& tr = b.agents[ui];
          tr.obs.col(k) = slot.obs[ui].flat();
          tr.x.col(k) = ja.x[ui].col(e);
          tr.action.col(k) = ja.action[ui].col(e);
          tr.applied.col(k) = applied[static_cast<std::size_t>(e)][ui];
          tr.next_obs.col(k) = res.observations[ui].flat();
          tr.log_prob[k] = ja.log_prob[ui][e];
          tr.value[k] = ja.value[ui][e];
          const double ri = r_int[static_cast<std::size_t>(e)][ui];
          tr.rewards[static_cast<std::size_t>(k)] = intrinsic::mix_rewards(res.rewards[ui], ri, beta);
          tr.predictors[static_cast<std::size_t>(k)] = used[static_cast<std::size_t>(e)][ui];
          rm.intrinsic_reward_mean[ui] += ri;
          const auto& jm = ja.messages[ui];
          for (int q = 0; q < jm.size(); ++q) {
            if (jm.target[static_cast<std::size_t>(q)] != e) continue;
            msg_cols[ui].push_back(jm.inputs.col(q));
            tr.messages.target.push_back(k);
            tr.messages.sender.push_back(jm.sender[static_cast<std::size_t>(q)]);
          }
          tr.msg_offset.push_back(static_cast<int>(tr.messages.target.size()));
          slot.agent_return[ui] += res.rewards[ui];
          slot.episode_return += res.rewards[ui];
        }
        if (dyn_on) {
          for (int i = 0; i < N; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            dynamics_[ui].replay.push({i, slot.obs[ui].flat(), Vector(applied[static_cast<std::size_t>(e)][ui]),
                                       res.observations[ui].flat()});
          }
        }
      }

      if (dyn_on) {
        for (int i = 0; i < N; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          const auto loss = intrinsic::train_dynamics_from_replay(
              dynamics_[ui], static_cast<std::size_t>(cfg_.algo.dynamics_batch), dynamics_rng_[ui]);
          if (loss) {
            rm.dynamics_loss[ui] += *loss;
            ++dyn_updates[ui];
          }
        }
      }

      // Advance or reset.
      for (int e = 0; e < E; ++e) {
        EnvSlot& slot = envs_[static_cast<std::size_t>(e)];
        env::StepResult& res = results[static_cast<std::size_t>(e)];
        if (res.done) {
          rm.episode_returns.push_back(slot.episode_return);
          reset_env(e);
        } else {
          slot.state = std::move(res.state);
          slot.obs = std::move(res.observations);
          slot.graph = std::move(next_graphs[static_cast<std::size_t>(e)]);
        }
      }
      env_steps_ += E;
    }

    for (int i = 0; i < N; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      AgentTrajectory& tr = b.agents[ui];
      tr.messages.inputs.resize(models_[ui].phi.input_dim(), static_cast<Eigen::Index>(msg_cols[ui].size()));
      for (std::size_t q = 0; q < msg_cols[ui].size(); ++q) tr.messages.inputs.col(static_cast<Eigen::Index>(q)) = msg_cols[ui][q];
      rm.intrinsic_reward_mean[ui] = total > 0 ? rm.intrinsic_reward_mean[ui] / total : 0.0;
      rm.dynamics_loss[ui] = dyn_updates[ui] > 0 ? rm.dynamics_loss[ui] / dyn_updates[ui]
                                                 : std::numeric_limits<double>::quiet_NaN();
    }

    const JointAction tail = act(models_, envs_, graph_on, cfg_.algo.aggregation, nullptr);
    b.bootstrap_value.resize(N, E);
    for (int i = 0; i < N; ++i) b.bootstrap_value.row(i) = tail.value[static_cast<std::size_t>(i)].transpose();
    return b;
  }

  // Independent clipped PPO for agent i over its own parameters only.
  PpoLosses ppo_update_agent(int i, const TrajectoryBatch& b, const GaeResult& gae) {
    const auto ui = static_cast<std::size_t>(i);
    const AgentTrajectory& tr = b.agents[ui];
    const Vector adv = normalize_advantages(gae.advantages);
    std::vector<int> order(static_cast<std::size_t>(b.size()));
    std::iota(order.begin(), order.end(), 0);
    PpoLosses acc;
    int updates = 0;
    for (int epoch = 0; epoch < cfg_.ppo.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), minibatch_rng_[ui]);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.ppo.minibatch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.ppo.minibatch_size));
        const Minibatch mb = gather_minibatch(tr, adv, gae.targets,
                                              std::span<const int>(order).subspan(start, end - start));
        policy::PolicyGrad g = policy::PolicyGrad::zeros_like(models_[ui]);
        const PpoLosses l = ppo_loss_and_grad(models_[ui], mb, cfg_.algo.aggregation, cfg_.ppo, g);
        policy::adam_step(models_[ui], g, policy_opt_[ui]);
        acc.policy += l.policy;
        acc.value += l.value;
        acc.entropy += l.entropy;
        acc.total += l.total;
        ++updates;
      }
    }
    if (updates > 0) {
      acc.policy /= updates;
      acc.value /= updates;
      acc.entropy /= updates;
      acc.total /= updates;
    }
    return acc;
  }

  std::vector<PpoLosses> ppo_update(const TrajectoryBatch& b, const std::vector<GaeResult>& gae) {
    const int N = b.n_agents;
    std::vector<PpoLosses> out(static_cast<std::size_t>(N));
    if (b.size() == 0) return out;
    if (!cfg_.algo.backprop_through_comm || !uses_graph(cfg_.algo.mode)) {
      for (int i = 0; i < N; ++i) out[static_cast<std::size_t>(i)] = ppo_update_agent(i, b, gae[static_cast<std::size_t>(i)]);
      return out;
    }
    return ppo_update_joint(b, gae);
  }

  // `batch_out`, when given, receives the rollout used for the update.
  IterationMetrics iterate(TrajectoryBatch* batch_out = nullptr) {
    RolloutMetrics rm;
    TrajectoryBatch b = collect_rollout(cfg_.steps_per_env(), &rm);
    const auto gae = compute_gae(b, cfg_.ppo.gamma, cfg_.ppo.gae_lambda);
    const auto losses = ppo_update(b, gae);
    IterationMetrics m;
    m.iteration = ++iteration_;
    m.env_steps = env_steps_;
    m.episodes = static_cast<int>(rm.episode_returns.size());
    if (!rm.episode_returns.empty()) {
      const auto& r = rm.episode_returns;
      m.episodic_reward_mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
      m.episodic_reward_min = *std::min_element(r.begin(), r.end());
      m.episodic_reward_max = *std::max_element(r.begin(), r.end());
    }
    m.intrinsic_reward_mean = rm.intrinsic_reward_mean;
    m.dynamics_loss = rm.dynamics_loss;
    for (const auto& l : losses) {
      m.policy_loss.push_back(l.policy);
      m.value_loss.push_back(l.value);
    }
    if (batch_out) *batch_out = std::move(b);
    return m;
  }

 private:
  void reset_env(int e) {
    EnvSlot& slot = envs_[static_cast<std::size_t>(e)];
    const std::uint64_t ep = slot.episodes_started++;
    env::Scenario sc = env::reset(cfg_.scenario, agents_, derive_seed(seed_, Stream::kEnvReset, static_cast<std::uint64_t>(e), ep));
    slot.state = std::move(sc.state);
    slot.obs = std::move(sc.observations);
    slot.graph = graph::build_comm_graph(slot.state, agents_, slot.obs);
    slot.episode_return = 0.0;
    slot.agent_return.assign(agents_.size(), 0.0);
  }

  // Gradients from receiver losses flow into the senders' encoders; all agents
  // step together on a shared minibatch order.
  std::vector<PpoLosses> ppo_update_joint(const TrajectoryBatch& b, const std::vector<GaeResult>& gae) {
    const int N = b.n_agents;
    const int dz = cfg_.model.d_z;
    std::vector<Vector> adv;
    for (const auto& g : gae) adv.push_back(normalize_advantages(g.advantages));
    std::vector<int> order(static_cast<std::size_t>(b.size()));
    std::iota(order.begin(), order.end(), 0);
    std::vector<PpoLosses> acc(static_cast<std::size_t>(N));
    int updates = 0;
    for (int epoch = 0; epoch < cfg_.ppo.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), joint_rng_);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.ppo.minibatch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.ppo.minibatch_size));
        const auto cols = std::span<const int>(order).subspan(start, end - start);
        const auto B = static_cast<Eigen::Index>(cols.size());
        std::vector<nn::MlpForward> sender_fwd;
        for (int j = 0; j < N; ++j) {
          Matrix xj(b.agents[static_cast<std::size_t>(j)].x.rows(), B);
          for (Eigen::Index k = 0; k < B; ++k) xj.col(k) = b.agents[static_cast<std::size_t>(j)].x.col(cols[static_cast<std::size_t>(k)]);
          sender_fwd.push_back(nn::mlp_forward(models_[static_cast<std::size_t>(j)].omega, xj));
        }
        std::vector<policy::PolicyGrad> grads;
        std::vector<Matrix> dz_sender;
        for (int j = 0; j < N; ++j) {
          grads.push_back(policy::PolicyGrad::zeros_like(models_[static_cast<std::size_t>(j)]));
          dz_sender.push_back(Matrix::Zero(dz, B));
        }
        for (int i = 0; i < N; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          Minibatch mb = gather_minibatch(b.agents[ui], adv[ui], gae[ui].targets, cols);
          for (int m = 0; m < mb.messages.size(); ++m) {
            const int j = mb.messages.sender[static_cast<std::size_t>(m)];
            const int k = mb.messages.target[static_cast<std::size_t>(m)];
            mb.messages.inputs.col(m).head(dz) = sender_fwd[static_cast<std::size_t>(j)].output.col(k);
          }
          Matrix d_msg;
          const PpoLosses l = ppo_loss_and_grad(models_[ui], mb, cfg_.algo.aggregation, cfg_.ppo, grads[ui], &d_msg);
          for (int m = 0; m < mb.messages.size(); ++m) {
            const int j = mb.messages.sender[static_cast<std::size_t>(m)];
            const int k = mb.messages.target[static_cast<std::size_t>(m)];
            dz_sender[static_cast<std::size_t>(j)].col(k) += d_msg.col(m).head(dz);
          }
          acc[ui].policy += l.policy;
          acc[ui].value += l.value;
          acc[ui].entropy += l.entropy;
          acc[ui].total += l.total;
        }
        for (int j = 0; j < N; ++j) {
          const auto uj = static_cast<std::size_t>(j);
          nn::mlp_backward(models_[uj].omega, sender_fwd[uj].cache, dz_sender[uj], grads[uj].omega);
        }
        for (int j = 0; j < N; ++j) {
          policy::adam_step(models_[static_cast<std::size_t>(j)], grads[static_cast<std::size_t>(j)],
                            policy_opt_[static_cast<std::size_t>(j)]);
        }
        ++updates;
      }
    }
    for (auto& a : acc) {
      if (updates > 0) {
        a.policy /= updates;
        a.value /= updates;
        a.entropy /= updates;
        a.total /= updates;
      }
    }
    return acc;
  }

  RunConfig cfg_;
  std::uint64_t seed_;
  std::vector<env::AgentSpec> agents_;
  std::vector<policy::AgentModel> models_;
  std::vector<nn::AdamState> policy_opt_;
  std::vector<intrinsic::DynamicsModel> dynamics_;
  std::vector<Rng> policy_rng_;
  std::vector<Rng> dynamics_rng_;
  std::vector<Rng> minibatch_rng_;
  Rng joint_rng_;
  std::vector<EnvSlot> envs_;
  int iteration_ = 0;
  long long env_steps_ = 0;
};

// ---------------------------------------------------------------------------

struct EvalResult {
  double mean_return = 0.0;
  std::vector<double> returns;           // team extrinsic return per episode
  std::vector<double> agent_mean_return;  // per agent
};

// Deterministic policy (action = mean), no learning, no intrinsic reward.
inline EvalResult evaluate(const RunConfig& cfg, const std::vector<env::AgentSpec>& agents,
                           const std::vector<policy::AgentModel>& models, int episodes, std::uint64_t seed) {
  if (episodes <= 0) throw std::invalid_argument("evaluate: episodes must be >= 1");
  const auto& sc = cfg.scenario;
  if (static_cast<int>(models.size()) != sc.n_agents || agents.size() != models.size()) {
    throw std::invalid_argument("evaluate: model count does not match scenario");
  }
  const auto dims = cfg.policy_dims();
  for (const auto& m : models) {
    if (m.omega.input_dim() != dims.x_dim || m.pi_decoder.output_dim() != dims.action_dim) {
      throw std::invalid_argument("evaluate: checkpoint shapes incompatible with scenario");
    }
  }
  const int N = sc.n_agents;
  std::vector<EnvSlot> envs(static_cast<std::size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    auto s = env::reset(sc, agents, derive_seed(seed, Stream::kEval, static_cast<std::uint64_t>(e)));
    EnvSlot& slot = envs[static_cast<std::size_t>(e)];
    slot.state = std::move(s.state);
    slot.obs = std::move(s.observations);
    slot.graph = graph::build_comm_graph(slot.state, agents, slot.obs);
    slot.agent_return.assign(static_cast<std::size_t>(N), 0.0);
  }
  for (int t = 0; t < sc.horizon; ++t) {
    const JointAction ja = act(models, envs, uses_graph(cfg.algo.mode), cfg.algo.aggregation, nullptr);
    for (int e = 0; e < episodes; ++e) {
      EnvSlot& slot = envs[static_cast<std::size_t>(e)];
      std::vector<env::Vec2> forces;
      for (int i = 0; i < N; ++i) forces.push_back(clamp_force(ja.action[static_cast<std::size_t>(i)].col(e), agents[static_cast<std::size_t>(i)].max_force));
      env::StepResult r = env::step(sc, agents, slot.state, forces);
      for (int i = 0; i < N; ++i) {
        slot.agent_return[static_cast<std::size_t>(i)] += r.rewards[static_cast<std::size_t>(i)];
        slot.episode_return += r.rewards[static_cast<std::size_t>(i)];
      }
      slot.state = std::move(r.state);
      slot.obs = std::move(r.observations);
      slot.graph = graph::build_comm_graph(slot.state, agents, slot.obs);
    }
  }
  EvalResult out;
  out.agent_mean_return.assign(static_cast<std::size_t>(N), 0.0);
  for (const EnvSlot& slot : envs) {
    out.returns.push_back(slot.episode_return);
    for (int i = 0; i < N; ++i) out.agent_mean_return[static_cast<std::size_t>(i)] += slot.agent_return[static_cast<std::size_t>(i)] / episodes;
  }
  out.mean_return = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / episodes;
  return out;
}

}  // namespace cohet::train
