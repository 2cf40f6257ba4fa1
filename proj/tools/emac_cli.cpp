// emac: train / sweep / diag front end for the episodic-memory actor-critic.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "emac/harness.hpp"
#include "emac/platform.hpp"

namespace {

using emac::harness::RunConfig;

struct Overrides {
  std::string config_path;
  std::optional<std::string> env, algorithm;
  std::optional<double> alpha, beta, gamma, tau, lr, epsilon, noise_std;
  std::optional<int> u, k, batch_size, warmup, eval_episodes, hidden, extension_horizon;
  std::optional<std::int64_t> steps, eval_every, diag_every, capacity;
  std::vector<std::uint64_t> seeds;
  std::string out = "runs/latest";
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file; flags override its values");
    app->add_option("--env", env, "pendulum | reacher");
    app->add_option("--algorithm", algorithm, "emac | ddpg (ddpg forces alpha=0, beta=0)");
    app->add_option("--alpha", alpha, "episodic blend coefficient of the critic loss");
    app->add_option("--beta", beta, "priority exponent (0 = uniform replay)");
    app->add_option("--gamma", gamma);
    app->add_option("--tau", tau);
    app->add_option("--lr", lr);
    app->add_option("--epsilon", epsilon);
    app->add_option("--noise-std", noise_std, "exploration std as a fraction of the action bound");
    app->add_option("--u", u, "projected key dimension");
    app->add_option("--k,-K", k, "nearest neighbours per lookup");
    app->add_option("--batch-size", batch_size);
    app->add_option("--warmup", warmup);
    app->add_option("--eval-episodes", eval_episodes);
    app->add_option("--hidden", hidden);
    app->add_option("--extension-horizon", extension_horizon);
    app->add_option("--steps", steps, "environment steps per seed");
    app->add_option("--eval-every", eval_every);
    app->add_option("--diag-every", diag_every, "overestimation measurement cadence (0 = off)");
    app->add_option("--capacity", capacity, "replay/memory capacity");
    app->add_option("--seed", seeds, "seed(s); repeat or comma-separate")->delimiter(',');
    app->add_option("--out", out, "output directory")->capture_default_str();
    app->add_flag("--quiet", quiet, "no progress output");
  }

  RunConfig build() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (env) c.env = *env;
    if (algorithm) c.algorithm = *algorithm;
    if (alpha) c.alpha = *alpha;
    if (beta) c.beta = *beta;
    if (gamma) c.gamma = *gamma;
    if (tau) c.tau = *tau;
    if (lr) c.lr = *lr;
    if (epsilon) c.epsilon = *epsilon;
    if (noise_std) c.noise_std = *noise_std;
    if (u) c.u = *u;
    if (k) c.k = *k;
    if (batch_size) c.batch_size = *batch_size;
    if (warmup) c.warmup_steps = *warmup;
    if (eval_episodes) c.eval_episodes = *eval_episodes;
    if (hidden) c.hidden = *hidden;
    if (extension_horizon) c.extension_horizon = *extension_horizon;
    if (steps) c.total_steps = *steps;
    if (eval_every) c.eval_every = *eval_every;
    if (diag_every) c.diag_every = *diag_every;
    if (capacity) c.memory_capacity = *capacity;
    if (!seeds.empty()) c.seeds = seeds;
    return c;
  }

  emac::harness::LogFn logger() const {
    if (quiet) return {};
    return [](const std::string& line) { std::cerr << line << '\n'; };
  }
};

void print_summary(const emac::harness::RunArtifacts& a) {
  for (const auto& s : a.seeds)
    std::cout << "seed " << s.seed << ": final return " << emac::harness::format_double(s.final_return()) << " ("
              << s.updates << " updates, " << s.wall_seconds << " s)\n";
  std::cout << "final return mean " << emac::harness::format_double(a.final_return_mean) << " std "
            << emac::harness::format_double(a.final_return_std) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  emac::tune_allocator();
  CLI::App app{"Episodic-memory actor-critic: training, sweeps and overestimation diagnostics"};
  app.require_subcommand(1);

  Overrides train_opts;
  auto* train = app.add_subcommand("train", "train with the given configuration");
  train_opts.attach(train);

  Overrides diag_opts;
  std::int64_t cadence = 5000;
  auto* diag = app.add_subcommand("diag", "train with overestimation measurements enabled");
  diag_opts.attach(diag);
  diag->add_option("--cadence", cadence, "measurement cadence in steps")->capture_default_str();

  Overrides sweep_opts;
  std::string axis;
  std::vector<double> values;
  auto* sweep = app.add_subcommand("sweep", "run one configuration per value of an axis");
  sweep_opts.attach(sweep);
  sweep->add_option("--axis", axis, "alpha | beta | u | K | gamma | tau | lr | epsilon | noise_std | batch_size")
      ->required();
  sweep->add_option("--values", values, "comma-separated values")->required()->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto cfg = train_opts.build();
      print_summary(emac::harness::run(cfg, train_opts.out, train_opts.logger()));
    } else if (*diag) {
      auto cfg = diag_opts.build();
      if (!diag_opts.diag_every) cfg.diag_every = cadence;
      print_summary(emac::harness::run(cfg, diag_opts.out, diag_opts.logger()));
    } else if (*sweep) {
      const auto cfg = sweep_opts.build();
      const auto result = emac::harness::sweep(cfg, axis, values, sweep_opts.out, sweep_opts.logger());
      for (std::size_t i = 0; i < result.values.size(); ++i)
        std::cout << axis << '=' << emac::harness::format_double(result.values[i]) << ": final return mean "
                  << emac::harness::format_double(result.runs[i].final_return_mean) << " std "
                  << emac::harness::format_double(result.runs[i].final_return_std) << '\n';
    }
  } catch (const emac::harness::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
