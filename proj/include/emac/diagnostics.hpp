#pragma once

// Overestimation study: critic Q(s, a), episodic Q_M and the true
// discounted return of the current policy, averaged over a batch of replay
// states at a fixed cadence.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "emac/agent.hpp"
#include "emac/environments.hpp"
#include "emac/episodic_memory.hpp"
#include "emac/replay.hpp"
#include "emac/tensor_nn.hpp"

namespace emac::diag {

struct OverestimationSample {
  std::int64_t step = 0;
  double q_pred_mean = 0.0;
  double q_true_mean = 0.0;
  double q_mem_mean = 0.0;
};

/// Measurement schedule: steps cadence, 2*cadence, ...
struct Cadence {
  std::int64_t every = 5000;

  bool due(std::int64_t step) const { return every > 0 && step > 0 && step % every == 0; }
  std::int64_t count(std::int64_t total_steps) const { return every > 0 ? total_steps / every : 0; }
};

/// Maps a batch of observations (obs_dim x B) to actions (act_dim x B).
using BatchPolicy = std::function<nn::Matrix(const nn::Matrix&)>;

inline BatchPolicy deterministic_policy(const nn::Network& actor) {
  return [&actor](const nn::Matrix& obs) { return nn::predict(actor, obs); };
}

/// Mean over start states of the discounted reward collected by `policy`
/// from each state for at most `max_steps` steps or until the episode ends.
/// Each rollout runs on its own clone of `prototype`, placed at the start
/// state by injection with the time limit disabled. All rollouts advance in
/// lockstep so the policy is evaluated on a batch.
inline double true_value_estimate(const BatchPolicy& policy, const env::Environment& prototype,
                                  const nn::Matrix& start_states, double gamma, int max_steps = 1000) {
  if (start_states.cols() == 0) throw std::invalid_argument("true_value_estimate: no start states");
  if (start_states.rows() != prototype.spec().observation_dim)
    throw std::invalid_argument("true_value_estimate: start state dimension mismatch");
  const auto n = start_states.cols();
  std::vector<std::unique_ptr<env::Environment>> sims;
  sims.reserve(static_cast<std::size_t>(n));
  nn::Matrix obs = start_states;
  for (Eigen::Index j = 0; j < n; ++j) {
    auto sim = prototype.clone();
    sim->set_unlimited(true);
    const nn::Vector s = start_states.col(j);
    sim->inject(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())));
    const auto o = sim->observe();
    for (Eigen::Index i = 0; i < obs.rows(); ++i) obs(i, j) = o[i];
    sims.push_back(std::move(sim));
  }
  std::vector<double> returns(static_cast<std::size_t>(n), 0.0);
  std::vector<Eigen::Index> active(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) active[j] = j;
  double discount = 1.0;
  for (int t = 0; t < max_steps && !active.empty() && discount != 0.0; ++t) {
    nn::Matrix batch(obs.rows(), static_cast<Eigen::Index>(active.size()));
    for (std::size_t c = 0; c < active.size(); ++c) batch.col(static_cast<Eigen::Index>(c)) = obs.col(active[c]);
    const nn::Matrix actions = policy(batch);
    std::vector<Eigen::Index> still;
    still.reserve(active.size());
    std::vector<double> a(static_cast<std::size_t>(actions.rows()));
    for (std::size_t c = 0; c < active.size(); ++c) {
      const auto j = active[c];
      for (Eigen::Index i = 0; i < actions.rows(); ++i) a[i] = actions(i, static_cast<Eigen::Index>(c));
      const auto r = sims[j]->step(a);
      returns[j] += discount * r.reward;
      if (r.done) continue;
      for (Eigen::Index i = 0; i < obs.rows(); ++i) obs(i, j) = r.observation[i];
      still.push_back(j);
    }
    active = std::move(still);
    discount *= gamma;
  }
  double total = 0.0;
  for (double r : returns) total += r;
  return total / static_cast<double>(n);
}

inline double true_value_estimate(const nn::Network& actor, const env::Environment& prototype,
                                  const nn::Matrix& start_states, double gamma, int max_steps = 1000) {
  return true_value_estimate(deterministic_policy(actor), prototype, start_states, gamma, max_steps);
}

/// Records batch means of critic Q(s, a), episodic Q_M(s, a) and the true
/// value estimate from the batch states. Reads only: agent, memory and the
/// prototype environment are left as they were.
inline OverestimationSample measure(std::int64_t step, const Agent& agent, const memory::MemoryTable& table,
                                    const memory::ProjectionMatrix& projection, const env::Environment& prototype,
                                    const replay::Batch& batch, int max_steps = 1000) {
  OverestimationSample s;
  s.step = step;
  const nn::Matrix q = nn::predict(agent.critic(), stack_rows(batch.states, batch.actions));
  s.q_pred_mean = q.mean();
  const auto keys = projection.project_columns(batch.states, batch.actions);
  const auto q_mem = table.batch_lookup(keys, agent.config().k);
  double sum = 0.0;
  for (double v : q_mem) sum += v;
  s.q_mem_mean = sum / static_cast<double>(q_mem.size());
  s.q_true_mean = true_value_estimate(agent.actor(), prototype, batch.states, agent.config().gamma, max_steps);
  return s;
}

}  // namespace emac::diag
