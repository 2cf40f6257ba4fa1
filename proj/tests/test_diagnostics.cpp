#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "emac/diagnostics.hpp"
#include "test_util.hpp"

using namespace emac;
using nn::Matrix;

namespace {

Matrix pendulum_states(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ang(-3.0, 3.0), vel(-2.0, 2.0);
  Matrix s(3, n);
  for (int j = 0; j < n; ++j) {
    const double th = ang(rng);
    s(0, j) = std::cos(th);
    s(1, j) = std::sin(th);
    s(2, j) = vel(rng);
  }
  return s;
}

nn::Network zero_like(nn::Network net) {
  for (auto& l : net.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return net;
}

}  // namespace

TEST(TrueValue, MyopicIsMeanOneStepReward) {
  env::Pendulum pend;
  Rng rng(1);
  const auto actor = make_actor(pend.spec(), 16, rng);
  std::mt19937_64 srng(2);
  const Matrix starts = pendulum_states(20, srng);
  double expect = 0.0;
  for (int j = 0; j < 20; ++j) {
    env::Pendulum sim;
    sim.set_unlimited(true);
    const std::vector<double> s{starts(0, j), starts(1, j), starts(2, j)};
    sim.inject(s);
    const auto a = nn::predict_one(actor, sim.observe());
    expect += sim.step(std::vector<double>{a(0)}).reward;
  }
  EXPECT_NEAR(diag::true_value_estimate(actor, pend, starts, 0.0), expect / 20.0, 1e-12);
}

TEST(TrueValue, AbsorbingFixedPointIsZero) {
  env::Pendulum pend;
  Rng rng(1);
  const auto actor = zero_like(make_actor(pend.spec(), 8, rng));
  Matrix upright(3, 4);
  upright.setZero();
  upright.row(0).setOnes();
  EXPECT_EQ(diag::true_value_estimate(actor, pend, upright, 0.99), 0.0);
}

TEST(TrueValue, HandSteppedReacherEpisode) {
  env::Reacher reacher;
  const diag::BatchPolicy right = [](const Matrix& obs) {
    Matrix a = Matrix::Zero(2, obs.cols());
    a.row(0).setOnes();
    return a;
  };
  Matrix start(4, 1);
  start << 0.0, 0.0, 0.18, 0.0;
  const double g = 0.9;
  const double expect = -0.13 + g * -0.08 + g * g * (10.0 - 0.03);
  EXPECT_NEAR(diag::true_value_estimate(right, reacher, start, g), expect, 1e-12);
  // Step cap: only the first two rewards count.
  EXPECT_NEAR(diag::true_value_estimate(right, reacher, start, g, 2), -0.13 + g * -0.08, 1e-12);
}

TEST(TrueValue, Errors) {
  env::Pendulum pend;
  Rng rng(1);
  const auto actor = make_actor(pend.spec(), 8, rng);
  EXPECT_THROW(diag::true_value_estimate(actor, pend, Matrix(3, 0), 0.9), std::invalid_argument);
  EXPECT_THROW(diag::true_value_estimate(actor, pend, Matrix::Zero(4, 2), 0.9), std::invalid_argument);
}

TEST(Measure, ZeroCriticAndMemoryBounds) {
  env::Pendulum pend;
  AgentConfig cfg;
  cfg.hidden = 16;
  cfg.k = 3;
  Rng rng(5);
  const auto actor = make_actor(pend.spec(), 16, rng);
  const auto critic = zero_like(make_critic(pend.spec(), 16, rng));
  Agent agent(pend.spec(), cfg, actor, critic);

  const memory::ProjectionMatrix proj(4, 4, 7);
  memory::MemoryTable table(4, 1000);
  replay::PrioritizedBuffer buffer(1000);
  std::mt19937_64 data(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0), ret(-50.0, -1.0);
  const Matrix states = pendulum_states(300, data);
  for (int i = 0; i < 300; ++i) {
    replay::Transition t;
    t.state = {states(0, i), states(1, i), states(2, i)};
    t.action = {u(data)};
    t.next_state = t.state;
    t.mc_return = ret(data);
    table.add(proj.project(replay::concat(t.state, t.action)), *t.mc_return);
    buffer.push(t);
  }
  buffer.recompute_priorities();
  const auto batch = buffer.sample(32, 0.0, data);

  std::stringstream before, after;
  table.write_snapshot(before);
  const auto critic_before = agent.critic();
  const auto sample = diag::measure(5000, agent, table, proj, pend, batch, 50);
  table.write_snapshot(after);
  EXPECT_EQ(before.str(), after.str());
  EXPECT_TRUE(testutil::bitwise_equal(critic_before, agent.critic()));

  EXPECT_EQ(sample.step, 5000);
  EXPECT_EQ(sample.q_pred_mean, 0.0);
  const auto keys = proj.project_columns(batch.states, batch.actions);
  double lo = INFINITY, hi = -INFINITY;
  for (Eigen::Index j = 0; j < batch.size(); ++j) {
    const auto r = table.lookup(std::span<const double>(keys).subspan(j * 4, 4), 3);
    for (auto i : r.indices) {
      lo = std::min(lo, table.value(i));
      hi = std::max(hi, table.value(i));
    }
  }
  EXPECT_GE(sample.q_mem_mean, lo);
  EXPECT_LE(sample.q_mem_mean, hi);
  EXPECT_TRUE(std::isfinite(sample.q_true_mean));
  EXPECT_EQ(sample.q_true_mean, diag::true_value_estimate(actor, pend, batch.states, cfg.gamma, 50));

  const auto again = diag::measure(5000, agent, table, proj, pend, batch, 50);
  EXPECT_EQ(again.q_pred_mean, sample.q_pred_mean);
  EXPECT_EQ(again.q_mem_mean, sample.q_mem_mean);
  EXPECT_EQ(again.q_true_mean, sample.q_true_mean);
}

TEST(Cadence, CountsAndSpacing) {
  const diag::Cadence c{5000};
  EXPECT_EQ(c.count(100000), 20);
  int hits = 0;
  for (std::int64_t t = 1; t <= 100000; ++t)
    if (c.due(t)) {
      EXPECT_EQ(t % 5000, 0);
      ++hits;
    }
  EXPECT_EQ(hits, 20);
  EXPECT_EQ(c.count(30000), 6);
  EXPECT_EQ(diag::Cadence{0}.count(100000), 0);
  EXPECT_FALSE(diag::Cadence{0}.due(5000));
}
