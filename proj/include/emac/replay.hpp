#pragma once

// Episode staging, discounted-return finalization, the main replay buffer
// and episodic-return prioritized sampling, P(i) = p_i^beta / sum_k p_k^beta.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "emac/episodic_memory.hpp"
#include "emac/tensor_nn.hpp"

namespace emac::replay {

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool done = false;       // natural termination
  bool truncated = false;  // time-limit cut; bootstrap stays on
  std::optional<double> mc_return;
};

/// Transitions of the episode in flight.
class EpisodeBuffer {
 public:
  void push(Transition t) {
    if (finished()) throw std::logic_error("episode buffer already holds a finished episode");
    if (t.mc_return) throw std::invalid_argument("staged transitions must not carry a return yet");
    steps_.push_back(std::move(t));
  }

  bool empty() const { return steps_.empty(); }
  std::size_t size() const { return steps_.size(); }
  const std::vector<Transition>& transitions() const { return steps_; }
  bool finished() const { return !steps_.empty() && (steps_.back().done || steps_.back().truncated); }
  bool truncated() const { return finished() && !steps_.back().done; }

  std::vector<Transition> release() {
    std::vector<Transition> out;
    out.swap(steps_);
    return out;
  }

  void clear() { steps_.clear(); }

 private:
  std::vector<Transition> steps_;
};

/// Fills mc_return by the backward recursion R_t = r_t + gamma * R_{t+1}
/// and empties the buffer. A naturally terminated episode seeds the tail
/// with 0; a truncated one seeds it with the discounted sum of the
/// extension rewards collected past the time limit.
inline std::vector<Transition> finalize_episode(EpisodeBuffer& episode, double gamma,
                                                std::span<const double> extension_rewards = {}) {
  if (episode.empty()) throw std::logic_error("finalize_episode: empty episode");
  if (!episode.finished()) throw std::logic_error("finalize_episode: episode has not ended");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("finalize_episode: gamma must be in [0, 1]");
  if (!episode.truncated() && !extension_rewards.empty())
    throw std::logic_error("finalize_episode: extension rewards given for a naturally terminated episode");

  double tail = 0.0;
  for (auto it = extension_rewards.rbegin(); it != extension_rewards.rend(); ++it) tail = *it + gamma * tail;

  auto steps = episode.release();
  double next = tail;
  for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
    const double r = it->reward + gamma * next;
    it->mc_return = r;
    next = r;
  }
  return steps;
}

/// Nonnegative priorities from returns: p_i = (R_i - R_min) + eta with
/// eta = 1e-2 (R_max - R_min + 1e-8), so the worst transition stays
/// sampleable and the order of returns is kept.
inline std::vector<double> priorities_from_returns(std::span<const double> returns) {
  if (returns.empty()) return {};
  const auto [lo, hi] = std::minmax_element(returns.begin(), returns.end());
  const double rmin = *lo, rmax = *hi;
  const double eta = 1e-2 * (rmax - rmin + 1e-8);
  std::vector<double> p(returns.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (returns[i] - rmin) + eta;
  return p;
}

/// P(i) = p_i^beta / sum_k p_k^beta. beta = 0 is exactly uniform.
inline std::vector<double> sampling_probabilities(std::span<const double> priorities, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  const std::size_t n = priorities.size();
  std::vector<double> prob(n);
  if (n == 0) return prob;
  if (beta == 0.0) {
    std::fill(prob.begin(), prob.end(), 1.0 / static_cast<double>(n));
    return prob;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (priorities[i] < 0.0) throw std::invalid_argument("priorities must be >= 0");
    prob[i] = std::pow(priorities[i], beta);
    total += prob[i];
  }
  if (!(total > 0.0)) throw std::invalid_argument("all priorities are zero");
  for (auto& p : prob) p /= total;
  return prob;
}

/// Draws indices with replacement from unnormalized nonnegative weights by
/// inverting the cumulative sum.
class CumulativeSampler {
 public:
  CumulativeSampler() = default;
  explicit CumulativeSampler(std::span<const double> weights) {
    cumsum_.resize(weights.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (!(weights[i] >= 0.0)) throw std::invalid_argument("sampler weights must be >= 0");
      acc += weights[i];
      cumsum_[i] = acc;
    }
    if (!weights.empty() && !(acc > 0.0)) throw std::invalid_argument("sampler weights sum to zero");
  }

  std::size_t size() const { return cumsum_.size(); }
  double total() const { return cumsum_.empty() ? 0.0 : cumsum_.back(); }

  template <class Urbg>
  std::size_t draw(Urbg& rng) const {
    if (cumsum_.empty()) throw std::logic_error("sampling from an empty distribution");
    std::uniform_real_distribution<double> u(0.0, total());
    const double x = u(rng);
    const auto it = std::upper_bound(cumsum_.begin(), cumsum_.end(), x);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumsum_.begin()), cumsum_.size() - 1);
  }

 private:
  std::vector<double> cumsum_;
};

/// Mini-batch in column layout (one column per sampled transition).
struct Batch {
  std::vector<std::size_t> indices;
  nn::Matrix states;
  nn::Matrix actions;
  nn::Vector rewards;
  nn::Matrix next_states;
  nn::Vector done;  // 1.0 at natural termination
  nn::Vector mc_returns;

  Eigen::Index size() const { return states.cols(); }
};

/// Replay buffer of finalized transitions with episodic-return priorities.
class PrioritizedBuffer {
 public:
  explicit PrioritizedBuffer(std::size_t capacity,
                             memory::OverflowPolicy overflow = memory::OverflowPolicy::error)
      : capacity_(capacity), overflow_(overflow) {
    if (capacity < 1) throw std::invalid_argument("replay capacity must be >= 1");
  }

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t remaining() const { return capacity_ - data_.size(); }
  memory::OverflowPolicy overflow_policy() const { return overflow_; }
  const Transition& at(std::size_t i) const { return data_.at(i); }
  const std::vector<double>& priorities() const { return priorities_; }

  /// Appends a finalized transition. Priorities are not touched until
  /// recompute_priorities(), which callers run once per episode.
  void push(Transition t) {
    if (!t.mc_return) throw std::invalid_argument("replay push: transition has no Monte-Carlo return");
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
      return;
    }
    if (overflow_ == memory::OverflowPolicy::error) throw memory::CapacityError("replay buffer is full");
    data_[next_slot_] = std::move(t);
    next_slot_ = (next_slot_ + 1) % capacity_;
  }

  void recompute_priorities() {
    std::vector<double> returns(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) returns[i] = *data_[i].mc_return;
    priorities_ = priorities_from_returns(returns);
    cached_beta_.reset();
  }

  /// Current P(i) for the given beta.
  std::vector<double> probabilities(double beta) const { return sampling_probabilities(priorities_, beta); }

  /// Indices drawn independently with replacement according to P(i).
  /// beta = 0 takes the uniform path.
  template <class Urbg>
  std::vector<std::size_t> sample_indices(std::size_t batch_size, double beta, Urbg& rng) {
    if (empty()) throw std::logic_error("sampling from an empty replay buffer");
    if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
    std::vector<std::size_t> idx(batch_size);
    if (beta == 0.0) {
      std::uniform_int_distribution<std::size_t> uni(0, data_.size() - 1);
      for (auto& i : idx) i = uni(rng);
      return idx;
    }
    if (priorities_.size() != data_.size())
      throw std::logic_error("priorities are stale; call recompute_priorities() after pushing");
    if (!cached_beta_ || *cached_beta_ != beta) {
      std::vector<double> w(priorities_.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(priorities_[i], beta);
      sampler_ = CumulativeSampler(w);
      cached_beta_ = beta;
    }
    for (auto& i : idx) i = sampler_.draw(rng);
    return idx;
  }

  Batch gather(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw std::invalid_argument("gather: empty index list");
    const auto& first = data_.at(indices[0]);
    const auto obs = static_cast<Eigen::Index>(first.state.size());
    const auto act = static_cast<Eigen::Index>(first.action.size());
    const auto b = static_cast<Eigen::Index>(indices.size());
    Batch batch;
    batch.indices.assign(indices.begin(), indices.end());
    batch.states.resize(obs, b);
    batch.actions.resize(act, b);
    batch.next_states.resize(obs, b);
    batch.rewards.resize(b);
    batch.done.resize(b);
    batch.mc_returns.resize(b);
    for (Eigen::Index j = 0; j < b; ++j) {
      const auto& t = data_.at(indices[j]);
      for (Eigen::Index i = 0; i < obs; ++i) {
        batch.states(i, j) = t.state[i];
        batch.next_states(i, j) = t.next_state[i];
      }
      for (Eigen::Index i = 0; i < act; ++i) batch.actions(i, j) = t.action[i];
      batch.rewards(j) = t.reward;
      batch.done(j) = t.done ? 1.0 : 0.0;
      batch.mc_returns(j) = *t.mc_return;
    }
    return batch;
  }

  template <class Urbg>
  Batch sample(std::size_t batch_size, double beta, Urbg& rng) {
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    const auto idx = sample_indices(batch_size, beta, rng);
    return gather(idx);
  }

 private:
  std::size_t capacity_;
  memory::OverflowPolicy overflow_;
  std::vector<Transition> data_;
  std::vector<double> priorities_;
  CumulativeSampler sampler_;
  std::optional<double> cached_beta_;
  std::size_t next_slot_ = 0;
};

inline std::vector<double> concat(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// Stores a finalized episode in the replay buffer and its projected
/// (state, action) -> return pairs in the episodic memory, then refreshes
/// priorities. Both stores grow in lockstep; with the error overflow policy
/// the whole episode is rejected before anything is written.
inline void push_finalized(PrioritizedBuffer& buffer, memory::MemoryTable& table,
                           const memory::ProjectionMatrix& projection, std::vector<Transition> transitions) {
  for (const auto& t : transitions)
    if (!t.mc_return) throw std::invalid_argument("push_finalized: transition is not finalized");
  if (buffer.overflow_policy() == memory::OverflowPolicy::error && transitions.size() > buffer.remaining())
    throw memory::CapacityError("replay buffer would overflow");
  if (table.overflow_policy() == memory::OverflowPolicy::error && transitions.size() > table.remaining())
    throw memory::CapacityError("episodic memory would overflow");
  std::vector<double> key(static_cast<std::size_t>(projection.projected_dim()));
  for (auto& t : transitions) {
    projection.project_into(concat(t.state, t.action), key);
    table.add(key, *t.mc_return);
    buffer.push(std::move(t));
  }
  buffer.recompute_priorities();
}

}  // namespace emac::replay
