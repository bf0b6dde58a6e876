#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cohet/env.hpp"

namespace {

using namespace cohet;
using env::Vec2;

env::ScenarioSpec spec_of(env::ScenarioKind k, int n) {
  env::ScenarioSpec s;
  s.kind = k;
  s.n_agents = n;
  return s;
}

// Two agents far apart with one landmark each, built by hand.
env::WorldState manual_world(const std::vector<Vec2>& pos, const std::vector<Vec2>& landmarks) {
  env::WorldState s;
  s.pos = pos;
  s.vel.assign(pos.size(), Vec2::Zero());
  s.landmarks = landmarks;
  for (std::size_t k = 0; k < landmarks.size(); ++k) s.landmark_tags.push_back(static_cast<int>(k));
  s.contacts.assign(pos.size(), 0);
  s.horizon = 100;
  return s;
}

std::vector<env::AgentSpec> plain_agents(int n, double radius = 0.1) {
  std::vector<env::AgentSpec> a(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    a[static_cast<std::size_t>(i)].id = i;
    a[static_cast<std::size_t>(i)].color_tag = i;
    a[static_cast<std::size_t>(i)].body_radius = radius;
  }
  return a;
}

std::vector<Vec2> random_forces(int n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::vector<Vec2> f;
  for (int i = 0; i < n; ++i) f.emplace_back(u(rng), u(rng));
  return f;
}

TEST(MakeScenario, SameSeedSameWorld) {
  const auto spec = spec_of(env::ScenarioKind::kSpread, 3);
  const auto a = env::make_scenario(spec, 1);
  const auto b = env::make_scenario(spec, 1);
  EXPECT_EQ(a.agents, b.agents);
  EXPECT_EQ(a.state.pos, b.state.pos);
  EXPECT_EQ(a.state.landmarks, b.state.landmarks);
  const auto c = env::make_scenario(spec, 2);
  EXPECT_NE(a.state.pos, c.state.pos);
}

TEST(MakeScenario, NavigationLandmarkTags) {
  const auto sc = env::make_scenario(spec_of(env::ScenarioKind::kNavigation, 3), 4);
  ASSERT_EQ(sc.state.landmarks.size(), 3u);
  std::vector<int> tags = sc.state.landmark_tags;
  std::vector<int> agent_tags;
  for (const auto& a : sc.agents) agent_tags.push_back(a.color_tag);
  std::sort(tags.begin(), tags.end());
  std::sort(agent_tags.begin(), agent_tags.end());
  EXPECT_EQ(tags, agent_tags);
}

TEST(MakeScenario, CollapsedRangesGiveIdenticalAgents) {
  auto spec = spec_of(env::ScenarioKind::kSpread, 4);
  spec.body_radius = {0.15, 0.15};
  spec.max_speed = {1.0, 1.0};
  spec.max_force = {0.8, 0.8};
  spec.obs_radius = {1.2, 1.2};
  const auto agents = env::draw_agents(spec, 9);
  for (const auto& a : agents) {
    EXPECT_EQ(a.body_radius, 0.15);
    EXPECT_EQ(a.max_speed, 1.0);
    EXPECT_EQ(a.max_force, 0.8);
    EXPECT_EQ(a.obs_radius, 1.2);
  }
}

TEST(MakeScenario, HeterogeneousWithinRanges) {
  const auto spec = spec_of(env::ScenarioKind::kNavigation, 8);
  const auto agents = env::draw_agents(spec, 3);
  for (const auto& a : agents) {
    EXPECT_GE(a.max_speed, spec.max_speed.lo);
    EXPECT_LE(a.max_speed, spec.max_speed.hi);
    EXPECT_GE(a.obs_radius, spec.obs_radius.lo);
    EXPECT_LE(a.obs_radius, spec.obs_radius.hi);
  }
  EXPECT_NE(agents[0].max_speed, agents[1].max_speed);
}

TEST(MakeScenario, PlacementFailureIsReported) {
  auto spec = spec_of(env::ScenarioKind::kSpread, 20);
  spec.world_half_extent = 0.2;
  spec.body_radius = {0.2, 0.2};
  spec.placement_retries = 50;
  EXPECT_THROW(env::make_scenario(spec, 0), std::runtime_error);
}

TEST(Step, ZeroForceAtRestStaysPut) {
  const auto spec = spec_of(env::ScenarioKind::kSpread, 3);
  const auto sc = env::make_scenario(spec, 5);
  const std::vector<Vec2> f(3, Vec2::Zero());
  const auto r = env::step(spec, sc.agents, sc.state, f);
  EXPECT_EQ(r.state.pos, sc.state.pos);
}

TEST(Step, OneEulerStepByHand) {
  auto spec = spec_of(env::ScenarioKind::kSpread, 1);
  spec.drag = 0.0;
  spec.dt = 0.1;
  spec.mass = 1.0;
  auto agents = plain_agents(1);
  agents[0].max_force = 2.0;
  agents[0].max_speed = 2.0;
  const auto s = manual_world({Vec2(0.3, -0.2)}, {Vec2(5, 5)});
  const auto r = env::step(spec, agents, s, std::vector<Vec2>{Vec2(1, 0)});
  EXPECT_DOUBLE_EQ(r.state.vel[0].x(), 0.1);
  EXPECT_EQ(r.state.vel[0].y(), 0.0);
  EXPECT_DOUBLE_EQ(r.state.pos[0].x(), 0.3 + 0.01);
  EXPECT_EQ(r.state.pos[0].y(), -0.2);
  EXPECT_EQ(r.state.t, 1);
}

TEST(Step, VelocityClampedToMaxSpeed) {
  auto spec = spec_of(env::ScenarioKind::kSpread, 1);
  auto agents = plain_agents(1);
  agents[0].max_force = 1e6;
  agents[0].max_speed = 0.7;
  const auto s = manual_world({Vec2(0, 0)}, {Vec2(5, 5)});
  const auto r = env::step(spec, agents, s, std::vector<Vec2>{Vec2(1e6, 3e5)});
  EXPECT_NEAR(r.state.vel[0].norm(), 0.7, 1e-15);
}

TEST(Step, SpeedBoundAndFixedObsDimOverRollouts) {
  for (auto kind : {env::ScenarioKind::kSpread, env::ScenarioKind::kNavigation, env::ScenarioKind::kFlocking}) {
    const auto spec = spec_of(kind, 4);
    auto sc = env::make_scenario(spec, 17);
    Rng rng(3);
    env::WorldState s = sc.state;
    for (int t = 0; t < spec.horizon; ++t) {
      const auto r = env::step(spec, sc.agents, s, random_forces(4, rng));
      for (int i = 0; i < 4; ++i) {
        EXPECT_LE(r.state.vel[static_cast<std::size_t>(i)].norm(), sc.agents[static_cast<std::size_t>(i)].max_speed + 1e-12);
        EXPECT_EQ(r.observations[static_cast<std::size_t>(i)].flat().size(), env::obs_dim(spec));
      }
      s = r.state;
    }
    EXPECT_TRUE(s.done());
  }
}

TEST(Step, FinishedEpisodeRejected) {
  auto spec = spec_of(env::ScenarioKind::kSpread, 2);
  spec.horizon = 1;
  const auto sc = env::make_scenario(spec, 0);
  const std::vector<Vec2> f(2, Vec2::Zero());
  const auto r = env::step(spec, sc.agents, sc.state, f);
  EXPECT_TRUE(r.done);
  EXPECT_THROW(env::step(spec, sc.agents, r.state, f), std::logic_error);
}

TEST(Step, SameActionsSameTrajectory) {
  const auto spec = spec_of(env::ScenarioKind::kFlocking, 3);
  const auto sc = env::make_scenario(spec, 8);
  Rng ra(1), rb(1);
  env::WorldState a = sc.state, b = sc.state;
  for (int t = 0; t < 50; ++t) {
    a = env::step(spec, sc.agents, a, random_forces(3, ra)).state;
    b = env::step(spec, sc.agents, b, random_forces(3, rb)).state;
  }
  EXPECT_EQ(a.pos, b.pos);
  EXPECT_EQ(a.vel, b.vel);
}

TEST(Step, KineticEnergyNonIncreasingWithoutActions) {
  const auto spec = spec_of(env::ScenarioKind::kSpread, 3);
  const auto sc = env::make_scenario(spec, 2);
  env::WorldState s = sc.state;
  s.vel = {Vec2(0.5, 0.1), Vec2(-0.3, 0.4), Vec2(0.0, -0.6)};
  const std::vector<Vec2> zero(3, Vec2::Zero());
  auto energy = [](const env::WorldState& w) {
    double e = 0.0;
    for (const auto& v : w.vel) e += 0.5 * v.squaredNorm();
    return e;
  };
  double prev = energy(s);
  for (int t = 0; t < 60; ++t) {
    s = env::step(spec, sc.agents, s, zero).state;
    const double e = energy(s);
    EXPECT_LE(e, prev);
    prev = e;
  }
}

TEST(Step, TranslationCovariance) {
  const auto spec = spec_of(env::ScenarioKind::kNavigation, 3);
  const auto sc = env::make_scenario(spec, 6);
  const Vec2 d(3.25, -1.5);
  env::WorldState a = sc.state, b = sc.state;
  for (auto& p : b.pos) p += d;
  for (auto& l : b.landmarks) l += d;
  Rng ra(4), rb(4);
  for (int t = 0; t < 40; ++t) {
    const auto x = env::step(spec, sc.agents, a, random_forces(3, ra));
    const auto y = env::step(spec, sc.agents, b, random_forces(3, rb));
    for (int i = 0; i < 3; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      EXPECT_NEAR((y.state.pos[ui] - x.state.pos[ui] - d).norm(), 0.0, 1e-9);
      EXPECT_NEAR((y.observations[ui].task - x.observations[ui].task).cwiseAbs().maxCoeff(), 0.0, 1e-9);
      EXPECT_EQ(x.rewards[ui], y.rewards[ui]);
    }
    a = x.state;
    b = y.state;
  }
}

TEST(Observe, VisibleLandmarkOffsetAndMasking) {
  const auto spec = spec_of(env::ScenarioKind::kSpread, 1);
  auto agents = plain_agents(1);
  agents[0].obs_radius = 1.0;
  const auto s = manual_world({Vec2(0.5, 0.5)}, {Vec2(0.75, 0.25)});
  auto o = env::observe(spec, s, agents[0]);
  EXPECT_DOUBLE_EQ(o.task[0], 0.25);
  EXPECT_DOUBLE_EQ(o.task[1], -0.25);
  EXPECT_EQ(o.task[2], 1.0);

  const auto far = manual_world({Vec2(0.5, 0.5)}, {Vec2(3.0, 0.5)});
  o = env::observe(spec, far, agents[0]);
  EXPECT_EQ(o.task[0], 0.0);
  EXPECT_EQ(o.task[1], 0.0);
  EXPECT_EQ(o.task[2], 0.0);
}

TEST(Observe, InfiniteRadiusSeesEverything) {
  const auto spec = spec_of(env::ScenarioKind::kSpread, 3);
  auto sc = env::make_scenario(spec, 10);
  for (auto& l : sc.state.landmarks) l *= 40.0;
  for (auto& a : sc.agents) {
    a.obs_radius = std::numeric_limits<double>::infinity();
    const auto o = env::observe(spec, sc.state, a);
    for (int k = 0; k < spec.n_landmarks(); ++k) {
      const Vec2 d = sc.state.landmarks[static_cast<std::size_t>(k)] - sc.state.pos[static_cast<std::size_t>(a.id)];
      EXPECT_EQ(o.task[3 * k], d.x());
      EXPECT_EQ(o.task[3 * k + 1], d.y());
      EXPECT_EQ(o.task[3 * k + 2], 1.0);
    }
  }
}

TEST(Observe, NavigationGoalOffsetAlwaysPresent) {
  const auto spec = spec_of(env::ScenarioKind::kNavigation, 2);
  auto agents = plain_agents(2);
  agents[0].obs_radius = agents[1].obs_radius = 0.5;
  const auto s = manual_world({Vec2(0, 0), Vec2(1, 1)}, {Vec2(4, 0), Vec2(-4, 0)});
  const auto o = env::observe(spec, s, agents[1]);
  EXPECT_EQ(o.task[0], -5.0);
  EXPECT_EQ(o.task[1], -1.0);
  EXPECT_EQ(o.task.tail(6).cwiseAbs().sum(), 0.0);
}

TEST(Reward, SparseOccupancyBonus) {
  auto spec = spec_of(env::ScenarioKind::kNavigation, 2);
  const auto agents = plain_agents(2);
  const auto s = manual_world({Vec2(1, 1), Vec2(-1, -1)}, {Vec2(1, 1), Vec2(2, 2)});
  EXPECT_EQ(env::extrinsic_reward(spec, agents, s, s, 0), spec.occupancy_bonus);
  EXPECT_EQ(env::extrinsic_reward(spec, agents, s, s, 1), 0.0);
}

TEST(Reward, CollisionPenaltyForBothAgents) {
  auto spec = spec_of(env::ScenarioKind::kSpread, 2);
  const auto agents = plain_agents(2, 0.2);
  const auto s = manual_world({Vec2(0, 0), Vec2(0.3, 0)}, {Vec2(5, 5), Vec2(-5, 5)});
  const auto r = env::step(spec, agents, s, std::vector<Vec2>(2, Vec2::Zero()));
  EXPECT_EQ(r.state.contacts[0], 1);
  EXPECT_EQ(r.state.contacts[1], 1);
  EXPECT_DOUBLE_EQ(r.rewards[0], -spec.collision_penalty);
  EXPECT_DOUBLE_EQ(r.rewards[1], -spec.collision_penalty);
  EXPECT_NEAR((r.state.pos[1] - r.state.pos[0]).norm(), 0.4, 1e-12);
}

TEST(Reward, FlockingStationaryCoincidentIsZero) {
  auto spec = spec_of(env::ScenarioKind::kFlocking, 3);
  spec.sparse = false;
  spec.collision_penalty = 0.0;
  const auto agents = plain_agents(3);
  const auto s = manual_world({Vec2(0.5, 0.5), Vec2(0.5, 0.5), Vec2(0.5, 0.5)}, {Vec2(2, 2)});
  for (int i = 0; i < 3; ++i) EXPECT_EQ(env::extrinsic_reward(spec, agents, s, s, i), 0.0);
}

TEST(Scenario, NamesRoundTrip) {
  for (auto k : {env::ScenarioKind::kSpread, env::ScenarioKind::kNavigation, env::ScenarioKind::kFlocking}) {
    EXPECT_EQ(env::scenario_from_string(env::to_string(k)), k);
  }
  EXPECT_THROW(env::scenario_from_string("tag"), std::invalid_argument);
}

}  // namespace
