#pragma once

// Seedable continuous-control environments with closed-form dynamics.
//
//   pendulum  Uniform rod swing-up. theta = 0 is upright, observation
//             [cos theta, sin theta, theta_dot] with theta_dot in [-8, 8].
//             Truncation only (time limit 200), never terminates naturally.
//             Reward -(theta^2 + 0.1 theta_dot^2 + 0.001 u^2) in [-16.3, 0].
//   reacher   Velocity-controlled point on [-1, 1]^2 chasing a goal in the
//             same square. Observation [x, y, goal_x, goal_y]. Terminates on
//             reaching the goal radius 0.05; time limit 100. Reward
//             -distance, plus 10 on the terminating step; |r| <= 10.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace emac::env {

struct EnvSpec {
  int observation_dim = 1;
  int action_dim = 1;
  double action_bound = 1.0;  // symmetric, per dimension
  int time_limit = 1;
  double reward_bound = 0.0;  // |reward| never exceeds this

  void validate() const {
    if (observation_dim < 1 || action_dim < 1 || !(action_bound > 0.0) || time_limit < 1)
      throw std::invalid_argument("invalid environment spec");
  }
};

struct StepResult {
  std::vector<double> observation;
  double reward = 0.0;
  bool done = false;       // natural termination
  bool truncated = false;  // time-limit cut
};

enum class EpisodeStatus { running, terminated, truncated };

class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string_view name() const = 0;
  virtual const EnvSpec& spec() const = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;

  /// Draws a fresh initial state from `seed` alone.
  std::vector<double> reset(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    sample_initial_state(rng);
    elapsed_ = 0;
    status_ = EpisodeStatus::running;
    return observation();
  }

  /// Puts the environment into the state described by `obs`, as if an
  /// episode had just started there.
  void inject(std::span<const double> obs) {
    if (static_cast<int>(obs.size()) != spec().observation_dim)
      throw std::invalid_argument("inject: observation dimension mismatch");
    load_observation(obs);
    elapsed_ = 0;
    status_ = EpisodeStatus::running;
  }

  StepResult step(std::span<const double> action) {
    if (status_ != EpisodeStatus::running) throw std::logic_error("step called on a finished episode");
    const auto& s = spec();
    if (static_cast<int>(action.size()) != s.action_dim)
      throw std::invalid_argument("step: action dimension mismatch");
    std::vector<double> clipped(action.begin(), action.end());
    for (auto& a : clipped) {
      if (std::isnan(a)) throw std::invalid_argument("step: NaN action");
      a = std::clamp(a, -s.action_bound, s.action_bound);
    }
    StepResult result;
    result.reward = advance(clipped);
    ++elapsed_;
    if (reached_terminal()) {
      result.done = true;
      status_ = EpisodeStatus::terminated;
    } else if (!unlimited_ && elapsed_ >= s.time_limit) {
      result.truncated = true;
      status_ = EpisodeStatus::truncated;
    }
    result.observation = observation();
    return result;
  }

  /// Disables the time limit; used for return-correction and true-value
  /// rollouts that run past the training horizon.
  void set_unlimited(bool unlimited) { unlimited_ = unlimited; }

  /// Re-opens a truncated episode so it can be stepped further.
  void resume_after_truncation() {
    if (status_ != EpisodeStatus::truncated) throw std::logic_error("episode was not truncated");
    status_ = EpisodeStatus::running;
  }

  std::vector<double> observe() const { return observation(); }
  EpisodeStatus status() const { return status_; }
  int elapsed_steps() const { return elapsed_; }

 protected:
  virtual void sample_initial_state(std::mt19937_64& rng) = 0;
  /// Advances the physics by one tick with an already clipped action and
  /// returns the reward of the post-transition state.
  virtual double advance(std::span<const double> action) = 0;
  virtual bool reached_terminal() const = 0;
  virtual std::vector<double> observation() const = 0;
  virtual void load_observation(std::span<const double> obs) = 0;

 private:
  int elapsed_ = 0;
  EpisodeStatus status_ = EpisodeStatus::terminated;  // must reset() first
  bool unlimited_ = false;
};

class Pendulum final : public Environment {
 public:
  static constexpr double mass = 1.0;
  static constexpr double length = 1.0;
  static constexpr double gravity = 9.81;
  static constexpr double dt = 0.05;
  static constexpr double max_torque = 2.0;
  static constexpr double max_speed = 8.0;
  static constexpr int time_limit = 200;

  /// Energy of the rod about its pivot, zero at horizontal.
  static double mechanical_energy(double theta, double theta_dot) {
    const double inertia = mass * length * length / 3.0;
    return 0.5 * inertia * theta_dot * theta_dot + mass * gravity * 0.5 * length * std::cos(theta);
  }

  static double angle_normalize(double x) {
    constexpr double pi = std::numbers::pi;
    double y = std::fmod(x + pi, 2.0 * pi);
    if (y < 0.0) y += 2.0 * pi;
    return y - pi;
  }

  static double reward(double theta, double theta_dot, double torque) {
    return -(theta * theta + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque);
  }

  std::string_view name() const override { return "pendulum"; }
  const EnvSpec& spec() const override { return spec_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<Pendulum>(*this); }

  double theta() const { return theta_; }
  double theta_dot() const { return theta_dot_; }

 protected:
  void sample_initial_state(std::mt19937_64& rng) override {
    std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
    std::uniform_real_distribution<double> speed(-1.0, 1.0);
    theta_ = angle(rng);
    theta_dot_ = speed(rng);
  }

  double advance(std::span<const double> action) override {
    const double u = action[0];
    const double acc = 3.0 * gravity / (2.0 * length) * std::sin(theta_) + 3.0 / (mass * length * length) * u;
    // Semi-implicit Euler: velocity first, then position with the new velocity.
    theta_dot_ = std::clamp(theta_dot_ + acc * dt, -max_speed, max_speed);
    theta_ = angle_normalize(theta_ + theta_dot_ * dt);
    return reward(theta_, theta_dot_, u);
  }

  bool reached_terminal() const override { return false; }

  std::vector<double> observation() const override {
    return {std::cos(theta_), std::sin(theta_), theta_dot_};
  }

  void load_observation(std::span<const double> obs) override {
    theta_ = std::atan2(obs[1], obs[0]);
    theta_dot_ = std::clamp(obs[2], -max_speed, max_speed);
  }

 private:
  EnvSpec spec_{.observation_dim = 3,
                .action_dim = 1,
                .action_bound = max_torque,
                .time_limit = time_limit,
                .reward_bound = std::numbers::pi * std::numbers::pi + 0.1 * max_speed * max_speed +
                                0.001 * max_torque * max_torque};
  double theta_ = 0.0;
  double theta_dot_ = 0.0;
};

class Reacher final : public Environment {
 public:
  static constexpr double dt = 0.05;
  static constexpr double max_speed = 1.0;
  static constexpr double goal_radius = 0.05;
  static constexpr double goal_bonus = 10.0;
  static constexpr double workspace = 1.0;  // half-width of the square
  static constexpr int time_limit = 100;

  std::string_view name() const override { return "reacher"; }
  const EnvSpec& spec() const override { return spec_; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<Reacher>(*this); }

  double distance_to_goal() const { return std::hypot(x_ - gx_, y_ - gy_); }

 protected:
  void sample_initial_state(std::mt19937_64& rng) override {
    std::uniform_real_distribution<double> coord(-workspace, workspace);
    x_ = coord(rng);
    y_ = coord(rng);
    // Resample the goal until the episode does not start inside it.
    do {
      gx_ = coord(rng);
      gy_ = coord(rng);
    } while (distance_to_goal() < goal_radius);
  }

  double advance(std::span<const double> action) override {
    x_ = std::clamp(x_ + dt * action[0], -workspace, workspace);
    y_ = std::clamp(y_ + dt * action[1], -workspace, workspace);
    const double d = distance_to_goal();
    return d < goal_radius ? goal_bonus - d : -d;
  }

  bool reached_terminal() const override { return distance_to_goal() < goal_radius; }

  std::vector<double> observation() const override { return {x_, y_, gx_, gy_}; }

  void load_observation(std::span<const double> obs) override {
    x_ = std::clamp(obs[0], -workspace, workspace);
    y_ = std::clamp(obs[1], -workspace, workspace);
    gx_ = std::clamp(obs[2], -workspace, workspace);
    gy_ = std::clamp(obs[3], -workspace, workspace);
  }

 private:
  EnvSpec spec_{.observation_dim = 4,
                .action_dim = 2,
                .action_bound = max_speed,
                .time_limit = time_limit,
                .reward_bound = goal_bonus};
  double x_ = 0.0, y_ = 0.0, gx_ = 0.5, gy_ = 0.5;
};

inline std::unique_ptr<Environment> make_environment(std::string_view name) {
  if (name == "pendulum") return std::make_unique<Pendulum>();
  if (name == "reacher") return std::make_unique<Reacher>();
  throw std::invalid_argument("unknown environment '" + std::string(name) + "'");
}

using Policy = std::function<std::vector<double>(std::span<const double>)>;

/// Continues a truncated episode on a copy of `env` for up to `horizon`
/// steps (fewer on natural termination) and returns the rewards. The
/// original environment is left untouched; nothing here is meant for
/// training data, only for completing discounted returns.
inline std::vector<double> rollout_extension(const Environment& env, const Policy& policy, int horizon) {
  if (env.status() != EpisodeStatus::truncated)
    throw std::logic_error("rollout_extension requires an episode that ended by truncation");
  if (horizon < 0) throw std::invalid_argument("rollout_extension: negative horizon");
  std::vector<double> rewards;
  rewards.reserve(static_cast<std::size_t>(horizon));
  auto sim = env.clone();
  sim->set_unlimited(true);
  sim->resume_after_truncation();
  auto obs = sim->observe();
  for (int i = 0; i < horizon; ++i) {
    const auto action = policy(obs);
    auto r = sim->step(action);
    rewards.push_back(r.reward);
    if (r.done) break;
    obs = std::move(r.observation);
  }
  return rewards;
}

/// Smallest horizon h with gamma^h < tol (0 when gamma == 0).
inline int default_extension_horizon(double gamma, double tol = 1e-3) {
  if (gamma <= 0.0) return 0;
  if (gamma >= 1.0) throw std::invalid_argument("extension horizon is unbounded for gamma >= 1");
  int h = static_cast<int>(std::ceil(std::log(tol) / std::log(gamma)));
  while (std::pow(gamma, h) >= tol) ++h;
  return h;
}

}  // namespace emac::env
