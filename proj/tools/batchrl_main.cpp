// Command-line experiment orchestrator: behavioral training, batch
// generation, offline training, the benchmark suite, and plot-data export.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "batchrl/behavioral.hpp"
#include "batchrl/harness.hpp"

using namespace batchrl;

namespace {

void add_common_overrides(CLI::App* cmd, std::string& config_path,
                          std::string& env,
                          std::string& algo, std::string& dataset,
                          std::vector<std::uint64_t>& seeds,
                          std::uint64_t& iterations, std::uint64_t& eval_interval,
                          std::string& out) {
  cmd->add_option("--config", config_path, "JSON config file (keys mirror ExperimentConfig)");
  cmd->add_option("--env", env, "environment name or spec file");
  cmd->add_option("--algo", algo, "algorithm tag (dqn|qrdqn|rem|bcq|klcontrol|spibb)");
  cmd->add_option("--dataset", dataset, "dataset file (generated when omitted)");
  cmd->add_option("--seed", seeds, "run seed(s)");
  cmd->add_option("--iterations", iterations, "offline training iterations T");
  cmd->add_option("--eval-interval", eval_interval, "iterations between evaluations");
  cmd->add_option("--out", out, "output directory");
}

ExperimentConfig resolve_config(const std::string& config_path, const std::string& env,
                                const std::string& algo, const std::string& dataset,
                                const std::vector<std::uint64_t>& seeds,
                                std::uint64_t iterations, std::uint64_t eval_interval,
                                const std::string& out) {
  ExperimentConfig config;
  if (!config_path.empty()) config = load_experiment_config(config_path);
  if (!env.empty()) config.env = env;
  if (!algo.empty()) config.algorithm = parse_algorithm(algo);
  if (!dataset.empty()) config.dataset = dataset;
  if (!seeds.empty()) config.seeds = seeds;
  if (iterations != UINT64_MAX) config.iterations = iterations;
  if (eval_interval != UINT64_MAX) config.eval_interval = eval_interval;
  if (!out.empty()) config.output_dir = out;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"batch RL benchmark harness"};
  app.require_subcommand(1);

  std::string config_path, env, algo, dataset, out;
  std::vector<std::uint64_t> seeds;
  std::uint64_t iterations = UINT64_MAX;
  std::uint64_t eval_interval = UINT64_MAX;

  // train-behavioral
  auto* cmd_behavioral = app.add_subcommand(
      "train-behavioral", "train an online DQN to use as the behavioral policy");
  int behavioral_steps = 5000;
  std::uint64_t behavioral_seed = 0;
  std::string net_out = "behavioral.net";
  double behavioral_lr = 1e-3;
  cmd_behavioral->add_option("--env", env)->required();
  cmd_behavioral->add_option("--steps", behavioral_steps, "environment steps");
  cmd_behavioral->add_option("--seed", behavioral_seed);
  cmd_behavioral->add_option("--learning-rate", behavioral_lr);
  cmd_behavioral->add_option("--out", net_out, "output parameter snapshot");

  // generate
  auto* cmd_generate = app.add_subcommand("generate", "generate a batch dataset");
  std::string behavioral_net;
  std::size_t num_transitions = 100000;
  std::uint64_t gen_seed = 0;
  std::string dataset_out = "dataset.brlb";
  bool require_hole = false;
  cmd_generate->add_option("--env", env)->required();
  cmd_generate->add_option("--behavioral", behavioral_net,
                           "behavioral Q snapshot (trained in-process when omitted)");
  cmd_generate->add_option("--steps", behavioral_steps,
                           "behavioral training steps when training in-process");
  cmd_generate->add_option("--transitions", num_transitions);
  cmd_generate->add_option("--seed", gen_seed);
  cmd_generate->add_flag("--require-coverage-hole", require_hole,
                         "fail unless the batch leaves some (s,a) unvisited");
  cmd_generate->add_option("--out", dataset_out, "output dataset file");

  // train
  auto* cmd_train = app.add_subcommand("train", "one offline training run");
  add_common_overrides(cmd_train, config_path, env, algo, dataset, seeds,
                       iterations, eval_interval, out);

  // suite
  auto* cmd_suite = app.add_subcommand("suite", "run every algorithm on a shared batch");
  std::vector<std::string> suite_algos;
  add_common_overrides(cmd_suite, config_path, env, algo, dataset, seeds,
                       iterations, eval_interval, out);
  cmd_suite->add_option("--algos", suite_algos, "algorithms to include");

  // plot-data
  auto* cmd_plot = app.add_subcommand("plot-data", "aggregate metrics into plot series");
  std::string metrics_dir;
  int window = 5;
  double clip = 100.0;
  cmd_plot->add_option("--out", metrics_dir, "metrics directory")->required();
  cmd_plot->add_option("--window", window, "sliding window size");
  cmd_plot->add_option("--clip", clip, "display clip for value estimates");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_behavioral->parsed()) {
      const MdpSpec spec = make_env(env);
      BehavioralConfig bc;
      bc.learning_rate = behavioral_lr;
      const DenseNet q = train_behavioral(spec, behavioral_steps, bc, behavioral_seed);
      save_net(q, net_out);
      std::cout << "wrote " << net_out << "\n";
    } else if (cmd_generate->parsed()) {
      const MdpSpec spec = make_env(env);
      BehavioralPolicy policy;
      if (!behavioral_net.empty()) {
        policy.q = load_net(behavioral_net);
      } else {
        BehavioralConfig bc;
        policy.q = train_behavioral(spec, behavioral_steps, bc, gen_seed);
      }
      GenerationStats stats;
      const BatchDataset data =
          generate_batch(spec, policy, num_transitions, gen_seed, &stats);
      if (require_hole && coverage_holes(data, spec) == 0) {
        throw std::runtime_error("generated batch has no coverage hole");
      }
      save_dataset(data, dataset_out);
      std::cout << "wrote " << dataset_out << " (" << data.transitions.size()
                << " transitions, " << stats.episodes << " episodes";
      if (!data.counts.empty()) {
        std::cout << ", " << coverage_holes(data, spec) << " coverage holes";
      }
      std::cout << ")\n";
    } else if (cmd_train->parsed()) {
      const ExperimentConfig config = resolve_config(config_path, env, algo, dataset,
                                                     seeds, iterations, eval_interval, out);
      const ExperimentResult result = run_experiment(config);
      for (const SeedResult& sr : result.seeds) {
        std::cout << "seed " << sr.seed << " final return "
                  << sr.records.back().mean_eval_return;
        if (sr.diverged_at >= 0) std::cout << " (diverged at iteration " << sr.diverged_at << ")";
        std::cout << "\n";
      }
    } else if (cmd_suite->parsed()) {
      SuiteConfig suite;
      suite.base = resolve_config(config_path, env, algo, dataset, seeds, iterations,
                                  eval_interval, out);
      if (!suite_algos.empty()) {
        suite.algorithms.clear();
        for (const std::string& name : suite_algos) {
          suite.algorithms.push_back(parse_algorithm(name));
        }
      }
      const SuiteResult result = run_benchmark_suite(suite);
      std::cout << "rank  algorithm   final_windowed_return\n";
      for (const SuiteRow& row : result.rows) {
        std::cout << "      " << row.name << "  " << row.final_windowed_return
                  << (row.diverged ? "  [diverged]" : "") << "\n";
      }
      std::cout << "      behavioral  " << result.behavioral_return << "\n";
      std::cout << "      oracle      " << result.oracle_return << "\n";
    } else if (cmd_plot->parsed()) {
      emit_plot_data(metrics_dir, window, clip);
      std::cout << "wrote plot series under " << metrics_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
