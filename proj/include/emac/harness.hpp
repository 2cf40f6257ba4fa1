#pragma once

// Run orchestration: the interact / finalize / sample / update loop,
// periodic greedy evaluation, overestimation measurements, parameter
// sweeps, and CSV/JSON artifacts.
//
// Artifacts of a run written to <out>:
//   config.json                resolved configuration
//   summary.json               per-seed and across-seed final returns
//   seed_<s>/curve.csv         step,eval_return_mean,eval_return_std
//   seed_<s>/diagnostics.csv   step,q_pred,q_true,q_mem
// Rows are flushed as they are produced, so an interrupted run leaves a
// valid prefix.

#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "emac/agent.hpp"
#include "emac/diagnostics.hpp"
#include "emac/environments.hpp"
#include "emac/episodic_memory.hpp"
#include "emac/replay.hpp"
#include "emac/rng.hpp"

namespace emac::harness {

using json = nlohmann::ordered_json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::string env = "pendulum";
  std::string algorithm = "emac";  // "emac" or "ddpg" (alpha = beta = 0, no memory term)
  std::int64_t total_steps = 0;    // 0 selects the environment's default budget
  std::int64_t eval_every = 1000;
  int eval_episodes = 10;
  std::vector<std::uint64_t> seeds{0};
  double gamma = 0.99;
  double alpha = 0.1;
  double beta = 0.5;
  double tau = 0.005;
  int k = 2;
  int u = 4;
  double epsilon = 1e-3;
  double lr = 1e-3;
  int batch_size = 256;
  int warmup_steps = 1000;
  std::int64_t memory_capacity = 200000;  // replay buffer and episodic memory
  bool ring_buffer = false;               // overwrite oldest instead of failing when full
  double noise_std = 0.1;                 // exploration std as a fraction of the action bound
  int extension_horizon = -1;             // -1: smallest h with gamma^h < 1e-3
  int hidden = 256;
  std::int64_t diag_every = 0;  // 0 disables overestimation measurements
  int diag_max_steps = 1000;

  static std::int64_t default_steps(const std::string& env_name) {
    if (env_name == "pendulum") return 30000;
    if (env_name == "reacher") return 20000;
    return 30000;
  }

  /// Fills every "auto" field and applies the baseline label.
  RunConfig resolved() const {
    RunConfig r = *this;
    if (r.total_steps == 0) r.total_steps = default_steps(r.env);
    if (r.extension_horizon == -1 && r.gamma >= 0.0 && r.gamma < 1.0)
      r.extension_horizon = env::default_extension_horizon(r.gamma);
    if (r.algorithm == "ddpg") {
      r.alpha = 0.0;
      r.beta = 0.0;
    }
    return r;
  }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid config: " + what);
    };
    require(env == "pendulum" || env == "reacher", "env must be 'pendulum' or 'reacher'");
    require(algorithm == "emac" || algorithm == "ddpg", "algorithm must be 'emac' or 'ddpg'");
    require(total_steps >= 0, "total_steps must be >= 0");
    require(eval_every >= 1, "eval_every must be >= 1");
    require(eval_episodes >= 1, "eval_episodes must be >= 1");
    require(!seeds.empty(), "seeds must not be empty");
    require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds must be distinct");
    require(gamma >= 0.0 && gamma < 1.0, "gamma must be in [0, 1)");
    require(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0, 1]");
    require(beta >= 0.0 && std::isfinite(beta), "beta must be >= 0");
    require(tau >= 0.0 && tau <= 1.0, "tau must be in [0, 1]");
    require(k >= 1, "K must be >= 1");
    require(u >= 1, "u must be >= 1");
    require(epsilon > 0.0 && std::isfinite(epsilon), "epsilon must be > 0");
    require(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(warmup_steps >= 0, "warmup_steps must be >= 0");
    require(memory_capacity >= 1, "memory_capacity must be >= 1");
    require(noise_std >= 0.0 && std::isfinite(noise_std), "noise_std must be >= 0");
    require(extension_horizon >= -1, "extension_horizon must be >= 0 (or -1 for automatic)");
    require(hidden >= 1, "hidden must be >= 1");
    require(diag_every >= 0, "diag_every must be >= 0");
    require(diag_max_steps >= 1, "diag_max_steps must be >= 1");
    if (diag_every > 0) {
      // At least one episode has been stored by the first measurement.
      const int limit = env::make_environment(env)->spec().time_limit;
      require(diag_every >= limit, "diag_every must be >= the environment time limit (" + std::to_string(limit) + ")");
    }
  }

  json to_json() const {
    json j;
    j["env"] = env;
    j["algorithm"] = algorithm;
    j["total_steps"] = total_steps;
    j["eval_every"] = eval_every;
    j["eval_episodes"] = eval_episodes;
    j["seeds"] = seeds;
    j["gamma"] = gamma;
    j["alpha"] = alpha;
    j["beta"] = beta;
    j["tau"] = tau;
    j["K"] = k;
    j["u"] = u;
    j["epsilon"] = epsilon;
    j["lr"] = lr;
    j["batch_size"] = batch_size;
    j["warmup_steps"] = warmup_steps;
    j["memory_capacity"] = memory_capacity;
    j["ring_buffer"] = ring_buffer;
    j["noise_std"] = noise_std;
    j["extension_horizon"] = extension_horizon;
    j["hidden"] = hidden;
    j["diag_every"] = diag_every;
    j["diag_max_steps"] = diag_max_steps;
    return j;
  }

  /// Overlays the keys of `j` onto this config. Unknown keys are rejected.
  void merge_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      try {
        if (key == "env") env = value.get<std::string>();
        else if (key == "algorithm") algorithm = value.get<std::string>();
        else if (key == "total_steps") total_steps = value.get<std::int64_t>();
        else if (key == "eval_every") eval_every = value.get<std::int64_t>();
        else if (key == "eval_episodes") eval_episodes = value.get<int>();
        else if (key == "seeds") seeds = value.get<std::vector<std::uint64_t>>();
        else if (key == "seed") seeds = {value.get<std::uint64_t>()};
        else if (key == "gamma") gamma = value.get<double>();
        else if (key == "alpha") alpha = value.get<double>();
        else if (key == "beta") beta = value.get<double>();
        else if (key == "tau") tau = value.get<double>();
        else if (key == "K" || key == "k") k = value.get<int>();
        else if (key == "u") u = value.get<int>();
        else if (key == "epsilon") epsilon = value.get<double>();
        else if (key == "lr") lr = value.get<double>();
        else if (key == "batch_size") batch_size = value.get<int>();
        else if (key == "warmup_steps") warmup_steps = value.get<int>();
        else if (key == "memory_capacity") memory_capacity = value.get<std::int64_t>();
        else if (key == "ring_buffer") ring_buffer = value.get<bool>();
        else if (key == "noise_std") noise_std = value.get<double>();
        else if (key == "extension_horizon") extension_horizon = value.get<int>();
        else if (key == "hidden") hidden = value.get<int>();
        else if (key == "diag_every") diag_every = value.get<std::int64_t>();
        else if (key == "diag_max_steps") diag_max_steps = value.get<int>();
        else throw ConfigError("unknown config key '" + key + "'");
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
      }
    }
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    c.merge_json(j);
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  AgentConfig agent_config(double action_bound) const {
    AgentConfig a;
    a.alpha = alpha;
    a.gamma = gamma;
    a.tau = tau;
    a.k = k;
    a.exploration_noise_std = noise_std * action_bound;
    a.batch_size = batch_size;
    a.warmup_steps = warmup_steps;
    a.lr = lr;
    a.hidden = hidden;
    return a;
  }
};

inline const std::vector<std::string>& sweepable_axes() {
  static const std::vector<std::string> axes{"alpha", "beta", "u",  "K",         "gamma",
                                             "tau",   "lr",   "epsilon", "noise_std", "batch_size"};
  return axes;
}

/// Returns `base` with one sweepable field replaced by `value`.
inline RunConfig with_axis(const RunConfig& base, const std::string& axis, double value) {
  RunConfig c = base;
  auto as_int = [&](const char* name) {
    if (value != std::floor(value)) throw ConfigError(std::string(name) + " takes integer values");
    return static_cast<int>(value);
  };
  if (axis == "alpha") c.alpha = value;
  else if (axis == "beta") c.beta = value;
  else if (axis == "u") c.u = as_int("u");
  else if (axis == "K" || axis == "k") c.k = as_int("K");
  else if (axis == "gamma") c.gamma = value;
  else if (axis == "tau") c.tau = value;
  else if (axis == "lr") c.lr = value;
  else if (axis == "epsilon") c.epsilon = value;
  else if (axis == "noise_std") c.noise_std = value;
  else if (axis == "batch_size") c.batch_size = as_int("batch_size");
  else throw ConfigError("axis '" + axis + "' is not sweepable");
  return c;
}

/// Shortest decimal text that reads back to the same binary64.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct CurveRow {
  std::int64_t step = 0;
  double eval_return_mean = 0.0;
  double eval_return_std = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<CurveRow> curve;
  std::vector<diag::OverestimationSample> diagnostics;
  std::int64_t updates = 0;
  std::int64_t episodes = 0;
  double wall_seconds = 0.0;
  /// Mean of the last (up to) ten evaluation means.
  double final_return() const {
    if (curve.empty()) return std::nan("");
    const std::size_t n = std::min<std::size_t>(10, curve.size());
    double s = 0.0;
    for (std::size_t i = curve.size() - n; i < curve.size(); ++i) s += curve[i].eval_return_mean;
    return s / static_cast<double>(n);
  }
};

struct RunArtifacts {
  json config;
  std::vector<SeedResult> seeds;
  double final_return_mean = 0.0;
  double final_return_std = 0.0;  // sample std over seeds, 0 for one seed
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs, bool sample) {
  if (xs.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double denom = sample ? static_cast<double>(xs.size()) - 1.0 : static_cast<double>(xs.size());
  return {m, denom > 0.0 ? std::sqrt(ss / denom) : 0.0};
}

/// Undiscounted returns of `episodes` greedy episodes, episode i seeded by
/// splitmix64(seed_base + i). Never touches replay or memory.
inline std::vector<double> evaluate_policy(const nn::Network& actor, const env::Environment& prototype,
                                           int episodes, std::uint64_t seed_base) {
  std::vector<double> returns;
  returns.reserve(static_cast<std::size_t>(episodes));
  auto sim = prototype.clone();
  sim->set_unlimited(false);
  for (int e = 0; e < episodes; ++e) {
    auto obs = sim->reset(splitmix64(seed_base + static_cast<std::uint64_t>(e)));
    double total = 0.0;
    for (;;) {
      const auto a = nn::predict_one(actor, obs);
      const auto r = sim->step(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
      total += r.reward;
      if (r.done || r.truncated) break;
      obs = r.observation;
    }
    returns.push_back(total);
  }
  return returns;
}

class CsvWriter {
 public:
  CsvWriter() = default;
  CsvWriter(const std::filesystem::path& path, const std::string& header) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << header << '\n';
    out_.flush();
  }

  bool is_open() const { return out_.is_open(); }

  void row(std::initializer_list<std::string> fields) {
    if (!out_.is_open()) return;
    bool first = true;
    for (const auto& f : fields) {
      if (!first) out_ << ',';
      out_ << f;
      first = false;
    }
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

using LogFn = std::function<void(const std::string&)>;

/// Trains one seed end to end. `out_dir` may be empty to skip file output.
inline SeedResult run_seed(const RunConfig& raw, std::uint64_t seed, const std::filesystem::path& out_dir = {},
                           const LogFn& log = {}) {
  const RunConfig cfg = raw.resolved();
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();

  auto env = env::make_environment(cfg.env);
  const env::EnvSpec spec = env->spec();
  const bool baseline = cfg.algorithm == "ddpg";
  const auto overflow = cfg.ring_buffer ? memory::OverflowPolicy::overwrite : memory::OverflowPolicy::error;
  const auto capacity = static_cast<std::size_t>(cfg.memory_capacity);

  Agent agent(spec, cfg.agent_config(spec.action_bound), seed);
  const memory::ProjectionMatrix projection(cfg.u, spec.observation_dim + spec.action_dim,
                                            substream_seed(seed, "projection"));
  memory::MemoryTable table(cfg.u, capacity, cfg.epsilon, overflow);
  replay::PrioritizedBuffer buffer(capacity, overflow);
  replay::EpisodeBuffer episode;

  Rng env_rng = make_substream(seed, "env");
  Rng sample_rng = make_substream(seed, "sampling");
  Rng diag_rng = make_substream(seed, "diagnostics");
  const std::uint64_t eval_base = substream_seed(seed, "eval");
  const diag::Cadence cadence{cfg.diag_every};

  SeedResult result;
  result.seed = seed;
  CsvWriter curve_csv, diag_csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    curve_csv = CsvWriter(out_dir / "curve.csv", "step,eval_return_mean,eval_return_std");
    diag_csv = CsvWriter(out_dir / "diagnostics.csv", "step,q_pred,q_true,q_mem");
  }

  const env::Policy behaviour = [&agent](std::span<const double> s) { return agent.select_action(s, true); };

  auto obs = env->reset(env_rng());
  for (std::int64_t t = 1; t <= cfg.total_steps; ++t) {
    auto action = agent.select_action(obs, true);
    auto step = env->step(action);
    agent.count_env_step();
    replay::Transition tr;
    tr.state = obs;
    tr.action = std::move(action);
    tr.reward = step.reward;
    tr.next_state = step.observation;
    tr.done = step.done;
    tr.truncated = step.truncated;
    episode.push(std::move(tr));
    obs = std::move(step.observation);

    if (step.done || step.truncated) {
      std::vector<double> extension;
      if (step.truncated) extension = env::rollout_extension(*env, behaviour, cfg.extension_horizon);
      replay::push_finalized(buffer, table, projection, replay::finalize_episode(episode, cfg.gamma, extension));
      ++result.episodes;
      obs = env->reset(env_rng());
    }

    if (!agent.in_warmup() && buffer.size() >= static_cast<std::size_t>(cfg.batch_size)) {
      const auto batch = buffer.sample(static_cast<std::size_t>(cfg.batch_size), cfg.beta, sample_rng);
      if (baseline) {
        agent.update_ddpg(batch);
      } else {
        const auto keys = projection.project_columns(batch.states, batch.actions);
        const auto q_mem = table.batch_lookup(keys, cfg.k);
        agent.update(batch, Eigen::Map<const nn::Vector>(q_mem.data(), static_cast<Eigen::Index>(q_mem.size())));
      }
      ++result.updates;
    }

    if (t % cfg.eval_every == 0) {
      const auto returns = evaluate_policy(agent.actor(), *env, cfg.eval_episodes, eval_base);
      const auto [m, s] = mean_std(returns, false);
      result.curve.push_back({t, m, s});
      curve_csv.row({std::to_string(t), format_double(m), format_double(s)});
      if (log) log("seed " + std::to_string(seed) + " step " + std::to_string(t) + " eval " + format_double(m));
    }

    if (cadence.due(t)) {
      const auto batch = buffer.sample(static_cast<std::size_t>(cfg.batch_size), 0.0, diag_rng);
      const auto sample = diag::measure(t, agent, table, projection, *env, batch, cfg.diag_max_steps);
      result.diagnostics.push_back(sample);
      diag_csv.row({std::to_string(t), format_double(sample.q_pred_mean), format_double(sample.q_true_mean),
                    format_double(sample.q_mem_mean)});
    }
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

inline json summary_json(const RunArtifacts& a, const std::string& status) {
  json j;
  j["status"] = status;
  j["final_return_mean"] = a.final_return_mean;
  j["final_return_std"] = a.final_return_std;
  json seeds = json::array();
  for (const auto& s : a.seeds) {
    json e;
    e["seed"] = s.seed;
    e["final_return"] = s.final_return();
    e["updates"] = s.updates;
    e["episodes"] = s.episodes;
    e["curve_rows"] = s.curve.size();
    e["diagnostic_rows"] = s.diagnostics.size();
    e["wall_seconds"] = s.wall_seconds;
    seeds.push_back(std::move(e));
  }
  j["seeds"] = std::move(seeds);
  return j;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Runs every seed of `config` in order. With an output directory, writes
/// config.json up front, one seed_<s>/ directory per seed and summary.json
/// at the end (also on failure, marked as aborted, before rethrowing).
inline RunArtifacts run(const RunConfig& config, const std::filesystem::path& out_dir = {}, const LogFn& log = {}) {
  const RunConfig cfg = config.resolved();
  cfg.validate();
  RunArtifacts artifacts;
  artifacts.config = cfg.to_json();
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_json(out_dir / "config.json", artifacts.config);
  }
  auto finish = [&](const std::string& status) {
    std::vector<double> finals;
    for (const auto& s : artifacts.seeds) finals.push_back(s.final_return());
    std::tie(artifacts.final_return_mean, artifacts.final_return_std) = mean_std(finals, true);
    if (!out_dir.empty()) write_json(out_dir / "summary.json", summary_json(artifacts, status));
  };
  try {
    for (const auto seed : cfg.seeds) {
      const auto dir = out_dir.empty() ? std::filesystem::path{} : out_dir / ("seed_" + std::to_string(seed));
      artifacts.seeds.push_back(run_seed(cfg, seed, dir, log));
    }
  } catch (const std::exception& e) {
    finish(std::string("aborted: ") + e.what());
    throw;
  }
  finish("complete");
  return artifacts;
}

struct SweepResult {
  std::string axis;
  std::vector<double> values;
  std::vector<RunArtifacts> runs;  // one per value, each covering every seed
};

/// Independent runs of `base` with `axis` set to each value, sharing the
/// base seeds. Writes <out>/<axis>_<value>/... per value plus
/// comparison.csv (value,seed,final_return) and sweep.json.
inline SweepResult sweep(const RunConfig& base, const std::string& axis, const std::vector<double>& values,
                         const std::filesystem::path& out_dir = {}, const LogFn& log = {}) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  SweepResult result;
  result.axis = axis;
  result.values = values;
  std::vector<RunConfig> configs;
  for (double v : values) {
    configs.push_back(with_axis(base, axis, v));
    configs.back().resolved().validate();
  }
  CsvWriter comparison;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    comparison = CsvWriter(out_dir / "comparison.csv", "value,seed,final_return");
  }
  json table = json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto dir = out_dir.empty() ? std::filesystem::path{} : out_dir / (axis + "_" + format_double(values[i]));
    auto artifacts = run(configs[i], dir, log);
    for (const auto& s : artifacts.seeds)
      comparison.row({format_double(values[i]), std::to_string(s.seed), format_double(s.final_return())});
    json e;
    e["value"] = values[i];
    e["final_return_mean"] = artifacts.final_return_mean;
    e["final_return_std"] = artifacts.final_return_std;
    table.push_back(std::move(e));
    result.runs.push_back(std::move(artifacts));
  }
  if (!out_dir.empty()) {
    json j;
    j["axis"] = axis;
    j["base_config"] = base.resolved().to_json();
    j["results"] = std::move(table);
    write_json(out_dir / "sweep.json", j);
  }
  return result;
}

}  // namespace emac::harness
