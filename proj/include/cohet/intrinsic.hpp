#pragma once

// Per-agent dynamics models and the neighbor-prediction intrinsic reward.
//
// Each agent i learns f_i(o, a) -> o' from its own transitions only. At step t
// neighbor j predicts agent i's next observation with its own model,
// o_hat_{j,i} = f_j(o_i^t, a_i^t), and hands the prediction over at t+1. For
// J = N_i^t intersected with N_i^{t+1}:
//
//   d(i,j) = 1 / max(|p_i - p_j|, eps),  w_j = d(i,j) / sum_{k in J} d(i,k)
//   r_int  = - sum_{j in J} w_j * || o_i^{t+1} - o_hat_{j,i} ||
//   r_total = r_ext + beta * r_int

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohet/env.hpp"
#include "cohet/nn.hpp"
#include "cohet/rng.hpp"

namespace cohet::intrinsic {

using env::Vec2;
using nn::Matrix;
using nn::Vector;

enum class Norm { kL2, kL1 };

inline std::string to_string(Norm n) { return n == Norm::kL2 ? "l2" : "l1"; }

inline Norm norm_from_string(const std::string& s) {
  if (s == "l2") return Norm::kL2;
  if (s == "l1") return Norm::kL1;
  throw std::invalid_argument("unknown norm '" + s + "'");
}

inline constexpr double kDistanceFloor = 1e-6;  // m

struct Transition {
  int agent = 0;
  Vector obs;
  Vector action;
  Vector next_obs;
};

// Fixed-capacity FIFO of one agent's own transitions.
class ReplayBuffer {
 public:
  ReplayBuffer(int owner, std::size_t capacity) : owner_(owner), capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay capacity must be > 0");
  }

  void push(Transition t) {
    if (t.agent != owner_) {
      throw std::logic_error("replay of agent " + std::to_string(owner_) +
                             " offered a transition of agent " + std::to_string(t.agent));
    }
    if (items_.size() < capacity_) {
      items_.push_back(std::move(t));
    } else {
      items_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  int owner() const { return owner_; }
  bool empty() const { return items_.empty(); }

  // i-th oldest entry.
  const Transition& at(std::size_t i) const { return items_[(head_ + i) % items_.size()]; }

  std::vector<const Transition*> sample(std::size_t n, Rng& rng) const {
    std::vector<const Transition*> out;
    if (items_.empty()) return out;
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) out.push_back(&items_[pick(rng)]);
    return out;
  }

 private:
  int owner_;
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<Transition> items_;
};

struct DynamicsModel {
  int owner = 0;
  nn::Mlp f;
  nn::AdamState optimizer;
  ReplayBuffer replay;

  int obs_dim() const { return f.output_dim(); }
  int action_dim() const { return f.input_dim() - f.output_dim(); }
};

// Three weight layers with ReLU: (obs + action) -> hidden -> hidden -> obs.
inline DynamicsModel make_dynamics_model(int owner, int obs_dim, int action_dim, int hidden,
                                         std::size_t replay_capacity, nn::AdamConfig adam,
                                         std::uint64_t seed) {
  nn::MlpSpec spec{{obs_dim + action_dim, hidden, hidden, obs_dim}, nn::Activation::kReLU};
  return DynamicsModel{owner, nn::mlp_init(spec, seed), nn::AdamState(adam),
                       ReplayBuffer(owner, replay_capacity)};
}

inline Matrix stack_inputs(std::span<const Vector> obs, std::span<const Vector> actions) {
  if (obs.size() != actions.size()) throw std::invalid_argument("stack_inputs: size mismatch");
  if (obs.empty()) return Matrix();
  const auto od = obs[0].size();
  const auto ad = actions[0].size();
  Matrix in(od + ad, static_cast<Eigen::Index>(obs.size()));
  for (std::size_t k = 0; k < obs.size(); ++k) {
    if (obs[k].size() != od || actions[k].size() != ad) {
      throw std::invalid_argument("stack_inputs: ragged observation/action");
    }
    in.col(static_cast<Eigen::Index>(k)) << obs[k], actions[k];
  }
  return in;
}

// Prediction by model `f` (agent j's) of the next observation of whoever
// produced (obs, action).
inline Vector predict_next(const DynamicsModel& model, const Vector& obs, const Vector& action) {
  if (obs.size() + action.size() != model.f.input_dim() || obs.size() != model.f.output_dim()) {
    throw std::invalid_argument("predict_next: observation/action layout mismatch");
  }
  Vector in(obs.size() + action.size());
  in << obs, action;
  return nn::mlp_apply_one(model.f, in);
}

// Batched predictions; column k of `inputs` is (o || a).
inline Matrix predict_next_batch(const DynamicsModel& model, const Matrix& inputs) {
  return nn::mlp_apply(model.f, inputs);
}

struct DynamicsLossGrad {
  double loss = 0.0;
  nn::MlpGrad grad;
};

// Mean squared error of f over the minibatch and its parameter gradient.
inline DynamicsLossGrad dynamics_loss_and_grad(const DynamicsModel& model,
                                               std::span<const Transition* const> batch) {
  if (batch.empty()) throw std::invalid_argument("dynamics minibatch is empty");
  const Eigen::Index od = model.f.output_dim();
  Matrix in(model.f.input_dim(), static_cast<Eigen::Index>(batch.size()));
  Matrix target(od, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const Transition& t = *batch[k];
    if (t.agent != model.owner) {
      throw std::logic_error("dynamics model trained on another agent's transition");
    }
    in.col(static_cast<Eigen::Index>(k)) << t.obs, t.action;
    target.col(static_cast<Eigen::Index>(k)) = t.next_obs;
  }
  const nn::MlpForward fwd = nn::mlp_forward(model.f, in);
  const nn::LossAndGrad l = nn::mse_loss(fwd.output, target);
  DynamicsLossGrad out{l.loss, nn::MlpGrad::zeros_like(model.f)};
  nn::mlp_backward(model.f, fwd.cache, l.grad, out.grad);
  return out;
}

// One Adam step on the mean squared error over the minibatch. Returns the loss
// measured before the step.
inline double train_dynamics_step(DynamicsModel& model, std::span<const Transition* const> batch) {
  const DynamicsLossGrad lg = dynamics_loss_and_grad(model, batch);
  nn::adam_step(model.f, lg.grad, model.optimizer);
  return lg.loss;
}

// Samples a minibatch from the model's own replay and takes one step.
// An empty replay is a no-op.
inline std::optional<double> train_dynamics_from_replay(DynamicsModel& model, std::size_t batch_size,
                                                        Rng& rng) {
  if (model.replay.empty()) {
    std::cerr << "warning: dynamics model of agent " << model.owner
              << " has an empty replay; skipping update\n";
    return std::nullopt;
  }
  const auto batch = model.replay.sample(batch_size, rng);
  return train_dynamics_step(model, batch);
}

inline std::vector<double> neighbor_weights(const Vec2& p_i, std::span<const Vec2> p_neighbors,
                                            double eps = kDistanceFloor) {
  if (p_neighbors.empty()) throw std::invalid_argument("neighbor_weights: empty neighbor set");
  std::vector<double> w(p_neighbors.size());
  double total = 0.0;
  for (std::size_t k = 0; k < p_neighbors.size(); ++k) {
    w[k] = 1.0 / std::max((p_i - p_neighbors[k]).norm(), eps);
    total += w[k];
  }
  for (double& x : w) x /= total;
  return w;
}

inline double misalignment(const Vector& actual, const Vector& predicted, Norm norm) {
  if (actual.size() != predicted.size()) throw std::invalid_argument("misalignment: size mismatch");
  const Vector d = actual - predicted;
  return norm == Norm::kL2 ? d.norm() : d.lpNorm<1>();
}

inline double intrinsic_reward_team(const Vector& next_obs, std::span<const Vector> predictions,
                                    std::span<const double> weights, Norm norm = Norm::kL2) {
  if (predictions.size() != weights.size()) {
    throw std::invalid_argument("intrinsic_reward_team: prediction/weight count mismatch");
  }
  double r = 0.0;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    r -= weights[k] * misalignment(next_obs, predictions[k], norm);
  }
  return r;
}

inline double intrinsic_reward_self(const Vector& next_obs, const Vector& self_prediction,
                                    Norm norm = Norm::kL2) {
  return -misalignment(next_obs, self_prediction, norm);
}

struct RewardRecord {
  double r_ext = 0.0;
  double r_int = 0.0;
  double beta = 0.0;
  double r_total = 0.0;
};

inline RewardRecord mix_rewards(double r_ext, double r_int, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  return {r_ext, r_int, beta, r_ext + beta * r_int};
}

}  // namespace cohet::intrinsic
