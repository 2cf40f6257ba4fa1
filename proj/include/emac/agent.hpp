#pragma once

// Actor-critic agent with an episodic-memory term in the critic objective:
//
//   Q'  = r + gamma (1 - done) Q_targ(s', pi_targ(s'))
//   J_Q = mean[(1 - alpha)(Q(s,a) - Q')^2 + alpha (Q(s,a) - Q_M)^2]
//   J_pi = -mean Q(s, pi(s))
//
// alpha = 0 is plain DDPG; update_ddpg() is that path written without the
// memory term, kept separate so the reduction can be checked.

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emac/environments.hpp"
#include "emac/replay.hpp"
#include "emac/rng.hpp"
#include "emac/tensor_nn.hpp"

namespace emac {

struct AgentConfig {
  double alpha = 0.1;
  double gamma = 0.99;
  double tau = 0.005;
  int k = 2;
  double exploration_noise_std = 0.2;  // absolute, in action units
  int batch_size = 256;
  int warmup_steps = 1000;
  double lr = 1e-3;
  int hidden = 256;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must be in [0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in [0, 1]");
    if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must be in [0, 1]");
    if (k < 1) throw std::invalid_argument("K must be >= 1");
    if (!(exploration_noise_std >= 0.0)) throw std::invalid_argument("exploration noise std must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (warmup_steps < 0) throw std::invalid_argument("warmup steps must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (hidden < 1) throw std::invalid_argument("hidden width must be >= 1");
  }
};

struct UpdateStats {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double mean_q = 0.0;
  double mean_q_mem = 0.0;
};

struct CriticLoss {
  double loss = 0.0;
  double mean_q = 0.0;
  nn::Gradients grads;
};

struct ActorLoss {
  double loss = 0.0;
  nn::Gradients grads;
};

inline nn::Matrix stack_rows(const nn::Matrix& top, const nn::Matrix& bottom) {
  if (top.cols() != bottom.cols()) throw std::invalid_argument("stack_rows: column mismatch");
  nn::Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

/// Two-hidden-layer ReLU actor with a tanh output scaled to the action bound.
inline nn::Network make_actor(const env::EnvSpec& spec, int hidden, Rng& rng) {
  const int sizes[] = {spec.observation_dim, hidden, hidden, spec.action_dim};
  return nn::make_mlp(sizes, nn::Activation::relu, nn::Activation::scaled_tanh, spec.action_bound, rng);
}

/// Two-hidden-layer ReLU critic over [state; action] with a linear output.
inline nn::Network make_critic(const env::EnvSpec& spec, int hidden, Rng& rng) {
  const int sizes[] = {spec.observation_dim + spec.action_dim, hidden, hidden, 1};
  return nn::make_mlp(sizes, nn::Activation::relu, nn::Activation::identity, 1.0, rng);
}

class Agent {
 public:
  Agent(const env::EnvSpec& spec, AgentConfig config, std::uint64_t seed)
      : spec_(spec), config_(config), warmup_rng_(make_substream(seed, "warmup")),
        noise_rng_(make_substream(seed, "noise")) {
    spec_.validate();
    config_.validate();
    auto init = make_substream(seed, "init");
    actor_ = make_actor(spec_, config_.hidden, init);
    critic_ = make_critic(spec_, config_.hidden, init);
    reset_targets_and_optimizers();
  }

  /// Agent around caller-supplied networks (tests, checkpoints).
  Agent(const env::EnvSpec& spec, AgentConfig config, nn::Network actor, nn::Network critic, std::uint64_t seed = 0)
      : spec_(spec), config_(config), actor_(std::move(actor)), critic_(std::move(critic)),
        warmup_rng_(make_substream(seed, "warmup")), noise_rng_(make_substream(seed, "noise")) {
    spec_.validate();
    config_.validate();
    actor_.validate();
    critic_.validate();
    if (actor_.input_dim() != spec_.observation_dim || actor_.output_dim() != spec_.action_dim)
      throw std::invalid_argument("actor shape does not match the environment");
    if (critic_.input_dim() != spec_.observation_dim + spec_.action_dim || critic_.output_dim() != 1)
      throw std::invalid_argument("critic shape does not match the environment");
    reset_targets_and_optimizers();
  }

  const AgentConfig& config() const { return config_; }
  const env::EnvSpec& spec() const { return spec_; }
  const nn::Network& actor() const { return actor_; }
  const nn::Network& critic() const { return critic_; }
  const nn::Network& target_actor() const { return target_actor_; }
  const nn::Network& target_critic() const { return target_critic_; }
  nn::Network& mutable_target_actor() { return target_actor_; }
  nn::Network& mutable_target_critic() { return target_critic_; }
  std::int64_t env_steps() const { return env_steps_; }
  bool in_warmup() const { return env_steps_ < config_.warmup_steps; }

  void count_env_step() { ++env_steps_; }

  /// Behaviour action when `explore`, otherwise the raw actor output.
  std::vector<double> select_action(std::span<const double> state, bool explore) {
    const auto n = static_cast<std::size_t>(spec_.action_dim);
    const double bound = spec_.action_bound;
    std::vector<double> action(n);
    if (explore && in_warmup()) {
      std::uniform_real_distribution<double> uni(-bound, bound);
      for (auto& a : action) a = uni(warmup_rng_);
      return action;
    }
    const auto out = nn::predict_one(actor_, state);
    for (std::size_t i = 0; i < n; ++i) action[i] = out(static_cast<Eigen::Index>(i));
    if (explore && config_.exploration_noise_std > 0.0) {
      std::normal_distribution<double> noise(0.0, config_.exploration_noise_std);
      for (auto& a : action) a = std::clamp(a + noise(noise_rng_), -bound, bound);
    }
    return action;
  }

  /// Q' per batch element from the target networks.
  nn::Vector compute_td_target(const replay::Batch& batch) const {
    const nn::Matrix next_actions = nn::predict(target_actor_, batch.next_states);
    const nn::Matrix next_q = nn::predict(target_critic_, stack_rows(batch.next_states, next_actions));
    nn::Vector target(batch.size());
    for (Eigen::Index j = 0; j < batch.size(); ++j)
      target(j) = batch.rewards(j) + config_.gamma * (1.0 - batch.done(j)) * next_q(0, j);
    return target;
  }

  CriticLoss critic_loss(const replay::Batch& batch, const nn::Vector& q_mem) const {
    return critic_loss(batch, q_mem, compute_td_target(batch));
  }

  /// Blended objective with a precomputed TD target.
  CriticLoss critic_loss(const replay::Batch& batch, const nn::Vector& q_mem, const nn::Vector& td_target) const {
    const auto b = batch.size();
    if (q_mem.size() != b || td_target.size() != b) throw std::invalid_argument("critic_loss: batch size mismatch");
    const double alpha = config_.alpha;
    const auto cache = nn::forward(critic_, stack_rows(batch.states, batch.actions));
    nn::Matrix dq(1, b);
    double loss = 0.0, q_sum = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
      const double q = cache.output(0, j);
      const double td = q - td_target(j);
      const double mem = q - q_mem(j);
      loss += (1.0 - alpha) * td * td + alpha * mem * mem;
      dq(0, j) = (2.0 / static_cast<double>(b)) * ((1.0 - alpha) * td + alpha * mem);
      q_sum += q;
    }
    CriticLoss out;
    out.loss = loss / static_cast<double>(b);
    out.mean_q = q_sum / static_cast<double>(b);
    out.grads = nn::backward(critic_, cache, dq).params;
    return out;
  }

  /// Plain TD objective, mean (Q - Q')^2.
  CriticLoss td_critic_loss(const replay::Batch& batch, const nn::Vector& td_target) const {
    const auto b = batch.size();
    if (td_target.size() != b) throw std::invalid_argument("td_critic_loss: batch size mismatch");
    const auto cache = nn::forward(critic_, stack_rows(batch.states, batch.actions));
    nn::Matrix dq(1, b);
    double loss = 0.0, q_sum = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
      const double q = cache.output(0, j);
      const double td = q - td_target(j);
      loss += td * td;
      dq(0, j) = (2.0 / static_cast<double>(b)) * td;
      q_sum += q;
    }
    CriticLoss out;
    out.loss = loss / static_cast<double>(b);
    out.mean_q = q_sum / static_cast<double>(b);
    out.grads = nn::backward(critic_, cache, dq).params;
    return out;
  }

  /// -mean Q(s, pi(s)); the gradient reaches the actor through the critic's
  /// action-input gradient. Critic parameters are not touched.
  ActorLoss actor_loss(const replay::Batch& batch) const {
    const auto b = batch.size();
    const auto actor_cache = nn::forward(actor_, batch.states);
    const auto critic_cache = nn::forward(critic_, stack_rows(batch.states, actor_cache.output));
    const nn::Matrix seed = nn::Matrix::Constant(1, b, -1.0 / static_cast<double>(b));
    const nn::Matrix dx = nn::backward_input(critic_, critic_cache, seed);
    const nn::Matrix da = dx.bottomRows(spec_.action_dim);
    ActorLoss out;
    out.loss = -critic_cache.output.sum() / static_cast<double>(b);
    out.grads = nn::backward(actor_, actor_cache, da).params;
    return out;
  }

  /// One critic step on the blended objective, one actor step, then soft
  /// target updates.
  UpdateStats update(const replay::Batch& batch, const nn::Vector& q_mem) {
    const auto td = compute_td_target(batch);
    auto critic = critic_loss(batch, q_mem, td);
    auto stats = apply(critic, batch);
    stats.mean_q_mem = q_mem.mean();
    return stats;
  }

  /// Baseline update without any episodic term.
  UpdateStats update_ddpg(const replay::Batch& batch) {
    const auto td = compute_td_target(batch);
    auto critic = td_critic_loss(batch, td);
    auto stats = apply(critic, batch);
    stats.mean_q_mem = std::nan("");
    return stats;
  }

  // Checkpoint: "EMACAGT1", config and counters, then actor, critic,
  // target actor, target critic in the nn parameter format.
  void save(std::ostream& os) const {
    os.write(kMagic, 8);
    for (double v : {config_.alpha, config_.gamma, config_.tau, config_.exploration_noise_std, config_.lr})
      nn::detail::write_f64(os, v);
    for (int v : {config_.k, config_.batch_size, config_.warmup_steps, config_.hidden})
      nn::detail::write_u32(os, static_cast<std::uint32_t>(v));
    nn::detail::write_u64(os, static_cast<std::uint64_t>(env_steps_));
    nn::write_parameters(os, actor_);
    nn::write_parameters(os, critic_);
    nn::write_parameters(os, target_actor_);
    nn::write_parameters(os, target_critic_);
  }

  /// Restores networks and counters; optimizer moments restart from zero.
  void load(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8))
      throw std::runtime_error("not an agent checkpoint");
    AgentConfig c;
    c.alpha = nn::detail::read_f64(is);
    c.gamma = nn::detail::read_f64(is);
    c.tau = nn::detail::read_f64(is);
    c.exploration_noise_std = nn::detail::read_f64(is);
    c.lr = nn::detail::read_f64(is);
    c.k = static_cast<int>(nn::detail::read_u32(is));
    c.batch_size = static_cast<int>(nn::detail::read_u32(is));
    c.warmup_steps = static_cast<int>(nn::detail::read_u32(is));
    c.hidden = static_cast<int>(nn::detail::read_u32(is));
    c.validate();
    const auto steps = static_cast<std::int64_t>(nn::detail::read_u64(is));
    auto actor = actor_, critic = critic_, target_actor = target_actor_, target_critic = target_critic_;
    nn::read_parameters(is, actor);
    nn::read_parameters(is, critic);
    nn::read_parameters(is, target_actor);
    nn::read_parameters(is, target_critic);
    config_ = c;
    env_steps_ = steps;
    actor_ = std::move(actor);
    critic_ = std::move(critic);
    target_actor_ = std::move(target_actor);
    target_critic_ = std::move(target_critic);
    actor_opt_ = nn::AdamState::for_network(actor_);
    critic_opt_ = nn::AdamState::for_network(critic_);
  }

 private:
  static constexpr char kMagic[8] = {'E', 'M', 'A', 'C', 'A', 'G', 'T', '1'};

  void reset_targets_and_optimizers() {
    target_actor_ = actor_;
    target_critic_ = critic_;
    actor_opt_ = nn::AdamState::for_network(actor_);
    critic_opt_ = nn::AdamState::for_network(critic_);
  }

  UpdateStats apply(const CriticLoss& critic, const replay::Batch& batch) {
    if (!std::isfinite(critic.loss)) throw nn::NonFiniteError("critic loss is not finite");
    nn::adam_step(critic_, critic.grads, critic_opt_, config_.lr);
    const auto actor = actor_loss(batch);
    if (!std::isfinite(actor.loss)) throw nn::NonFiniteError("actor loss is not finite");
    nn::adam_step(actor_, actor.grads, actor_opt_, config_.lr);
    nn::soft_update(target_critic_, critic_, config_.tau);
    nn::soft_update(target_actor_, actor_, config_.tau);
    UpdateStats s;
    s.critic_loss = critic.loss;
    s.actor_loss = actor.loss;
    s.mean_q = critic.mean_q;
    return s;
  }

  env::EnvSpec spec_;
  AgentConfig config_;
  nn::Network actor_;
  nn::Network critic_;
  nn::Network target_actor_;
  nn::Network target_critic_;
  nn::AdamState actor_opt_;
  nn::AdamState critic_opt_;
  Rng warmup_rng_;
  Rng noise_rng_;
  std::int64_t env_steps_ = 0;
};

}  // namespace emac
