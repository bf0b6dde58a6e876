#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "cohet/metrics.hpp"
#include "cohet/trainer.hpp"

namespace {

using namespace cohet;
using nn::Matrix;
using nn::Vector;

RunConfig tiny(AlgoMode mode, int n_agents = 3) {
  RunConfig c;
  c.algo.mode = mode;
  c.scenario.n_agents = n_agents;
  c.scenario.horizon = 20;
  c.run.n_envs = 3;
  c.ppo.train_batch_size = 60;
  c.ppo.minibatch_size = 32;
  c.ppo.epochs = 2;
  c.model.hidden_width = 16;
  c.model.d_z = 8;
  c.model.h_dim = 16;
  c.algo.dynamics_hidden = 16;
  c.algo.dynamics_batch = 32;
  return c;
}

std::uint64_t hash_model(policy::AgentModel m) {
  nn::ParamBlocks p;
  policy::append_blocks(m, p);
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& b : p) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(b.data());
    for (std::size_t k = 0; k < b.size() * sizeof(double); ++k) h = (h ^ bytes[k]) * 1099511628211ULL;
  }
  return h;
}

// Direct double sum: A_t = sum_k (gamma lambda)^k delta_{t+k}, stopping at episode ends.
double gae_direct(const std::vector<double>& r, const std::vector<double>& v, const std::vector<std::uint8_t>& done,
                  double bootstrap, double gamma, double lambda, std::size_t t) {
  double a = 0.0, coef = 1.0;
  for (std::size_t k = t; k < r.size(); ++k) {
    const double next = k + 1 < r.size() ? v[k + 1] : bootstrap;
    const double delta = r[k] + (done[k] ? 0.0 : gamma * next) - v[k];
    a += coef * delta;
    if (done[k]) break;
    coef *= gamma * lambda;
  }
  return a;
}

TEST(Rollout, ZeroStepsGivesEmptyBatch) {
  train::Trainer t(tiny(AlgoMode::kCohetTeam), 0);
  const auto b = t.collect_rollout(0);
  EXPECT_EQ(b.size(), 0);
  EXPECT_EQ(t.env_steps(), 0);
  const auto gae = train::compute_gae(b, 0.99, 0.95);
  EXPECT_EQ(gae[0].advantages.size(), 0);
}

TEST(Rollout, SingleAgentTeamHasZeroIntrinsicReward) {
  train::Trainer t(tiny(AlgoMode::kCohetTeam, 1), 3);
  const auto b = t.collect_rollout(40);
  for (const auto& r : b.agents[0].rewards) EXPECT_EQ(r.r_int, 0.0);

  train::Trainer s(tiny(AlgoMode::kCohetSelf, 1), 3);
  const auto bs = s.collect_rollout(40);
  int nonzero = 0;
  for (const auto& r : bs.agents[0].rewards) nonzero += r.r_int != 0.0;
  EXPECT_GT(nonzero, 0);
}

TEST(Rollout, RewardRecordsAreConsistent) {
  auto cfg = tiny(AlgoMode::kCohetTeam);
  cfg.algo.beta = 0.1;
  train::Trainer t(cfg, 4);
  const auto b = t.collect_rollout(20);
  int neighbors_used = 0;
  for (const auto& tr : b.agents) {
    for (std::size_t k = 0; k < tr.rewards.size(); ++k) {
      const auto& r = tr.rewards[k];
      EXPECT_EQ(r.r_total, r.r_ext + r.beta * r.r_int);
      EXPECT_LE(r.r_int, 0.0);
      EXPECT_EQ(r.r_int == 0.0, tr.predictors[k].empty());
      neighbors_used += !tr.predictors[k].empty();
    }
  }
  EXPECT_GT(neighbors_used, 0);
}

TEST(Rollout, BaselineMatchesTeamWithZeroBeta) {
  auto zero = tiny(AlgoMode::kCohetTeam);
  zero.algo.beta = 0.0;
  train::Trainer a(zero, 9);
  train::Trainer b(tiny(AlgoMode::kBaseline), 9);
  for (int k = 0; k < 2; ++k) {
    train::TrajectoryBatch ba, bb;
    const auto ma = a.iterate(&ba);
    const auto mb = b.iterate(&bb);
    EXPECT_EQ(metrics::format_row(ma), metrics::format_row(mb));
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(ba.agents[static_cast<std::size_t>(i)].action, bb.agents[static_cast<std::size_t>(i)].action);
      EXPECT_EQ(ba.agents[static_cast<std::size_t>(i)].next_obs, bb.agents[static_cast<std::size_t>(i)].next_obs);
    }
  }
}

TEST(Rollout, IppoSendsNoMessages) {
  train::Trainer t(tiny(AlgoMode::kIppo), 1);
  const auto b = t.collect_rollout(20);
  for (const auto& tr : b.agents) {
    EXPECT_EQ(tr.messages.size(), 0);
    for (const auto& r : tr.rewards) EXPECT_EQ(r.r_total, r.r_ext);
  }
  const auto m = t.iterate();
  EXPECT_TRUE(std::isnan(m.dynamics_loss[0]));
}

TEST(Gae, TelescopesToRewardToGo) {
  const std::vector<double> r{1.0, -2.0, 0.5, 3.0};
  const std::vector<double> v(4, 0.0);
  const std::vector<std::uint8_t> done{0, 0, 0, 1};
  std::vector<double> adv(4);
  train::gae_trace(r, v, done, 99.0, 1.0, 1.0, adv);
  EXPECT_DOUBLE_EQ(adv[0], 2.5);
  EXPECT_DOUBLE_EQ(adv[1], 1.5);
  EXPECT_DOUBLE_EQ(adv[2], 3.5);
  EXPECT_DOUBLE_EQ(adv[3], 3.0);
}

TEST(Gae, LambdaZeroIsTdResidual) {
  const std::vector<double> r{1.0, -2.0, 0.5};
  const std::vector<double> v{0.3, -0.7, 1.1};
  const std::vector<std::uint8_t> done{0, 0, 0};
  std::vector<double> adv(3);
  train::gae_trace(r, v, done, 0.4, 0.9, 0.0, adv);
  EXPECT_DOUBLE_EQ(adv[0], 1.0 + 0.9 * -0.7 - 0.3);
  EXPECT_DOUBLE_EQ(adv[1], -2.0 + 0.9 * 1.1 + 0.7);
  EXPECT_DOUBLE_EQ(adv[2], 0.5 + 0.9 * 0.4 - 1.1);
}

TEST(Gae, MatchesDirectSumOnRandomTraces) {
  Rng rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution ends(0.15);
  for (int inst = 0; inst < 50; ++inst) {
    std::vector<double> r(10), v(10);
    std::vector<std::uint8_t> done(10);
    for (int k = 0; k < 10; ++k) {
      r[static_cast<std::size_t>(k)] = g(rng);
      v[static_cast<std::size_t>(k)] = g(rng);
      done[static_cast<std::size_t>(k)] = ends(rng);
    }
    const double boot = g(rng);
    std::vector<double> adv(10);
    train::gae_trace(r, v, done, boot, 0.99, 0.95, adv);
    for (std::size_t t = 0; t < 10; ++t) EXPECT_NEAR(adv[t], gae_direct(r, v, done, boot, 0.99, 0.95, t), 1e-10);
  }
}

TEST(Gae, TargetsAreAdvantagePlusValue) {
  train::Trainer t(tiny(AlgoMode::kCohetTeam), 2);
  const auto b = t.collect_rollout(20);
  const auto gae = train::compute_gae(b, 0.99, 0.95);
  for (int i = 0; i < 3; ++i) {
    const auto& g = gae[static_cast<std::size_t>(i)];
    EXPECT_LT((g.targets - g.advantages - b.agents[static_cast<std::size_t>(i)].value).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Advantages, NormalizedPerAgent) {
  Rng rng(5);
  std::normal_distribution<double> g(3.0, 7.0);
  Vector a(500);
  for (int k = 0; k < 500; ++k) a[k] = g(rng);
  const Vector n = train::normalize_advantages(a);
  EXPECT_LT(std::abs(n.mean()), 1e-9);
  EXPECT_LT(std::abs(std::sqrt((n.array() - n.mean()).square().mean()) - 1.0), 1e-6);
  const Vector flat = train::normalize_advantages(Vector::Constant(10, 2.0));
  EXPECT_TRUE(flat.isZero(0.0));
}

struct PpoFixture {
  policy::AgentModel model;
  train::Minibatch mb;
};

PpoFixture ppo_fixture(int B) {
  policy::PolicyDims d;
  d.x_dim = 3;
  d.d_z = 4;
  d.h_dim = 5;
  d.hidden = {6};
  PpoFixture f{policy::make_agent_model(d, 3, -0.3), {}};
  Rng rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  f.mb.x = Matrix::NullaryExpr(3, B, [&] { return g(rng); });
  const auto fwd = policy::policy_forward(f.model, f.mb.x, nullptr);
  f.mb.action = fwd.mean() + Matrix::NullaryExpr(2, B, [&] { return 0.5 * g(rng); });
  f.mb.old_log_prob.resize(B);
  for (int k = 0; k < B; ++k) {
    f.mb.old_log_prob[k] = nn::gaussian_log_prob(fwd.mean().col(k), f.model.log_std, f.mb.action.col(k));
  }
  f.mb.advantage = Vector::Zero(B);
  f.mb.target = fwd.values().row(0).transpose();
  return f;
}

TEST(PpoLoss, UnitRatioZeroAdvantageHasNoPolicyGradient) {
  auto f = ppo_fixture(6);
  PpoConfig cfg;
  cfg.value_coef = 0.0;
  cfg.entropy_coef = 0.0;
  auto g = policy::PolicyGrad::zeros_like(f.model);
  const auto l = train::ppo_loss_and_grad(f.model, f.mb, policy::Aggregation::kSum, cfg, g);
  EXPECT_EQ(l.policy, 0.0);
  for (const auto& w : g.pi.weights) EXPECT_TRUE(w.isZero(0.0));
  for (const auto& w : g.omega.weights) EXPECT_TRUE(w.isZero(0.0));
  EXPECT_TRUE(g.log_std.isZero(0.0));
}

TEST(PpoLoss, RatioIsClippedForPositiveAdvantage) {
  auto f = ppo_fixture(1);
  f.mb.old_log_prob[0] -= std::log(2.0);  // rho = 2
  f.mb.advantage[0] = 1.5;
  PpoConfig cfg;
  cfg.value_coef = 0.0;
  cfg.entropy_coef = 0.0;
  auto g = policy::PolicyGrad::zeros_like(f.model);
  const auto l = train::ppo_loss_and_grad(f.model, f.mb, policy::Aggregation::kSum, cfg, g);
  EXPECT_NEAR(l.policy, -1.2 * 1.5, 1e-12);
  for (const auto& w : g.pi.weights) EXPECT_TRUE(w.isZero(0.0));
}

TEST(PpoLoss, UnclippedBranchForNegativeAdvantage) {
  auto f = ppo_fixture(1);
  f.mb.old_log_prob[0] -= std::log(2.0);
  f.mb.advantage[0] = -1.0;
  PpoConfig cfg;
  auto g = policy::PolicyGrad::zeros_like(f.model);
  const auto l = train::ppo_loss_and_grad(f.model, f.mb, policy::Aggregation::kSum, cfg, g);
  EXPECT_NEAR(l.policy, 2.0, 1e-12);
}

TEST(PpoLoss, AdamDrivesQuadraticDownMonotonically) {
  auto f = ppo_fixture(8);
  f.mb.target = Vector::LinSpaced(8, -2.0, 2.0);
  PpoConfig cfg;
  cfg.value_coef = 1.0;
  cfg.entropy_coef = 0.0;
  nn::AdamState opt(nn::AdamConfig{1e-3, 0.9, 0.999, 1e-8});
  double prev = INFINITY;
  for (int k = 0; k < 100; ++k) {
    auto g = policy::PolicyGrad::zeros_like(f.model);
    const auto l = train::ppo_loss_and_grad(f.model, f.mb, policy::Aggregation::kSum, cfg, g);
    EXPECT_LT(l.total, prev) << "update " << k;
    prev = l.total;
    policy::adam_step(f.model, g, opt);
  }
}

TEST(PpoLoss, EmptyMinibatchRejected) {
  auto f = ppo_fixture(1);
  f.mb.x.resize(3, 0);
  auto g = policy::PolicyGrad::zeros_like(f.model);
  EXPECT_THROW(train::ppo_loss_and_grad(f.model, f.mb, policy::Aggregation::kSum, PpoConfig{}, g),
               std::invalid_argument);
}

TEST(PpoUpdate, TouchesOnlyTheUpdatedAgent) {
  train::Trainer t(tiny(AlgoMode::kCohetTeam), 6);
  const auto b = t.collect_rollout(20);
  const auto gae = train::compute_gae(b, 0.99, 0.95);
  std::vector<std::uint64_t> before;
  for (const auto& m : t.models()) before.push_back(hash_model(m));
  t.ppo_update_agent(1, b, gae[1]);
  EXPECT_EQ(hash_model(t.models()[0]), before[0]);
  EXPECT_NE(hash_model(t.models()[1]), before[1]);
  EXPECT_EQ(hash_model(t.models()[2]), before[2]);
}

TEST(PpoUpdate, JointBackpropReachesSenders) {
  auto cfg = tiny(AlgoMode::kCohetTeam);
  cfg.algo.backprop_through_comm = true;
  train::Trainer a(cfg, 6);
  cfg.algo.backprop_through_comm = false;
  train::Trainer b(cfg, 6);
  const auto ma = a.iterate();
  const auto mb = b.iterate();
  EXPECT_NE(hash_model(a.models()[0]), hash_model(b.models()[0]));
  for (double v : ma.policy_loss) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(ma.episodic_reward_mean, mb.episodic_reward_mean);  // same first rollout
}

TEST(Train, SameSeedSameMetrics) {
  train::Trainer a(tiny(AlgoMode::kCohetSelf), 11);
  train::Trainer b(tiny(AlgoMode::kCohetSelf), 11);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(metrics::format_row(a.iterate()), metrics::format_row(b.iterate()));
}

TEST(Evaluate, ZeroEpisodesRejected) {
  train::Trainer t(tiny(AlgoMode::kCohetTeam), 0);
  EXPECT_THROW(train::evaluate(t.config(), t.agents(), t.models(), 0, 1), std::invalid_argument);
}

TEST(Evaluate, RepeatableAndReportsRandomPolicyFloor) {
  auto cfg = tiny(AlgoMode::kCohetTeam);
  cfg.scenario.kind = env::ScenarioKind::kSpread;
  train::Trainer t(cfg, 2);
  const auto a = train::evaluate(cfg, t.agents(), t.models(), 5, 7);
  const auto b = train::evaluate(cfg, t.agents(), t.models(), 5, 7);
  EXPECT_EQ(a.returns, b.returns);
  EXPECT_EQ(a.agent_mean_return, b.agent_mean_return);
  ::testing::Test::RecordProperty("untrained_spread_mean_return", std::to_string(a.mean_return));
}

TEST(Evaluate, IncompatibleShapesRejected) {
  train::Trainer t(tiny(AlgoMode::kCohetTeam), 0);
  auto cfg = t.config();
  cfg.scenario.kind = env::ScenarioKind::kFlocking;
  EXPECT_THROW(train::evaluate(cfg, t.agents(), t.models(), 2, 1), std::invalid_argument);
  auto models = t.models();
  models.pop_back();
  EXPECT_THROW(train::evaluate(t.config(), t.agents(), models, 2, 1), std::invalid_argument);
}

}  // namespace
