#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "batchrl/agents.hpp"
#include "batchrl/behavioral.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/dp.hpp"
#include "batchrl/mdp.hpp"

namespace batchrl {

// Spec for generating a dataset in-process when no dataset file is given.
struct GenerationSpec {
  std::size_t num_transitions = 100000;
  std::uint64_t seed = 0;
  int behavioral_steps = 0;  // 0: derived from near_oracle_steps * fraction
  int near_oracle_steps = 20000;
  BehavioralConfig behavioral;
  bool require_coverage_hole = false;
};

struct ExperimentConfig {
  std::string env;
  Algorithm algorithm = Algorithm::Dqn;
  AgentConfig agent;  // overrides applied on top of defaults
  std::string dataset;             // path; empty means generate
  GenerationSpec generation;
  std::uint64_t iterations = 200000;  // T
  std::uint64_t eval_interval = 2000;
  int eval_episodes = 10;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int value_estimate_minibatches = 100;
  std::string output_dir = "out";

  void validate() const {
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    if (iterations > 0 && eval_interval > iterations) {
      throw std::invalid_argument("config: eval_interval must be <= iterations");
    }
    if (eval_interval == 0) throw std::invalid_argument("config: eval_interval must be > 0");
  }
};

// One evaluation snapshot.
struct MetricsRecord {
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
  double mean_eval_return = 0.0;
  double return_std = 0.0;
  double mean_value_estimate = 0.0;
  double training_loss = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> records;
  std::int64_t diverged_at = -1;  // iteration of the first non-finite loss
  double wall_clock_seconds = 0.0;
};

struct ExperimentResult {
  std::string env;
  Algorithm algorithm = Algorithm::Dqn;
  std::vector<SeedResult> seeds;
};

// ---------------------------------------------------------------------------
// Evaluation rollouts
// ---------------------------------------------------------------------------

struct EvalStats {
  double mean_return = 0.0;
  double return_std = 0.0;  // population convention
};

template <typename ActFn>
EvalStats evaluate_rollouts(const MdpSpec& env, ActFn&& act_fn, int episodes,
                            Rng& rng) {
  std::vector<double> returns;
  returns.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    EpisodeCursor cursor = reset(env, rng);
    double ep_return = 0.0;
    while (true) {
      const int action = act_fn(env.observe(cursor.state), rng);
      const CursorStep cs = advance(env, cursor, action, rng);
      ep_return += cs.result.reward;
      if (cs.result.done || cs.truncated) break;
    }
    returns.push_back(ep_return);
  }
  EvalStats stats;
  for (double r : returns) stats.mean_return += r;
  stats.mean_return /= episodes;
  double sq = 0.0;
  for (double r : returns) sq += (r - stats.mean_return) * (r - stats.mean_return);
  stats.return_std = std::sqrt(sq / episodes);
  return stats;
}

inline EvalStats evaluate_agent(const MdpSpec& env, const AgentState& agent,
                                int episodes, Rng& rng) {
  return evaluate_rollouts(
      env,
      [&](const std::vector<double>& obs, Rng& r) {
        return act(agent, obs, agent.config.eval_epsilon, r);
      },
      episodes, rng);
}

inline EvalStats evaluate_behavioral(const MdpSpec& env,
                                     const BehavioralPolicy& policy,
                                     int episodes, Rng& rng) {
  std::vector<double> returns;
  returns.reserve(episodes);
  for (int e = 0; e < episodes; ++e) {
    EpisodeCursor cursor = reset(env, rng);
    const double epsilon = policy.draw_episode_epsilon(rng);
    double ep_return = 0.0;
    while (true) {
      const int action = policy.act(env.observe(cursor.state), epsilon, rng);
      const CursorStep cs = advance(env, cursor, action, rng);
      ep_return += cs.result.reward;
      if (cs.result.done || cs.truncated) break;
    }
    returns.push_back(ep_return);
  }
  EvalStats stats;
  for (double r : returns) stats.mean_return += r;
  stats.mean_return /= episodes;
  double sq = 0.0;
  for (double r : returns) sq += (r - stats.mean_return) * (r - stats.mean_return);
  stats.return_std = std::sqrt(sq / episodes);
  return stats;
}

// ---------------------------------------------------------------------------
// Metrics files: one CSV per seed plus an aggregate. Wall-clock timing goes
// to a separate sidecar so metrics bytes stay a pure function of config+seed.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string run_stem(const std::string& env, Algorithm algo) {
  return env + "_" + algorithm_name(algo);
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "seed,iteration,mean_eval_return,return_std,mean_value_estimate,training_loss\n";
  for (const MetricsRecord& r : records) {
    out << r.seed << "," << r.iteration << "," << format_double(r.mean_eval_return)
        << "," << format_double(r.return_std) << ","
        << format_double(r.mean_value_estimate) << ","
        << format_double(r.training_loss) << "\n";
  }
}

inline std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty metrics file " + path);
  std::vector<MetricsRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    MetricsRecord r;
    std::getline(ss, field, ','); r.seed = std::stoull(field);
    std::getline(ss, field, ','); r.iteration = std::stoull(field);
    std::getline(ss, field, ','); r.mean_eval_return = std::stod(field);
    std::getline(ss, field, ','); r.return_std = std::stod(field);
    std::getline(ss, field, ','); r.mean_value_estimate = std::stod(field);
    std::getline(ss, field, ','); r.training_loss = std::stod(field);
    records.push_back(r);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Offline training of one agent on one dataset
// ---------------------------------------------------------------------------

inline AgentConfig resolve_agent_config(const ExperimentConfig& config,
                                        const MdpSpec& env,
                                        std::uint64_t seed) {
  AgentConfig agent = config.agent;
  agent.algorithm = config.algorithm;
  agent.discount = env.discount;
  agent.init_seed = seed * 0x9e37u + 1;
  return agent;
}

// Runs the offline loop for one seed. A non-finite loss is recorded, not
// fatal: the series freezes at the last finite snapshot and the run is
// marked diverged.
inline SeedResult train_offline_seed(const MdpSpec& env, const BatchDataset& data,
                                     const ExperimentConfig& config,
                                     std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SeedResult result;
  result.seed = seed;

  AgentState agent = make_agent(resolve_agent_config(config, env, seed),
                                data.obs_dim(), data.num_actions);
  if (agent.config.algorithm == Algorithm::Spibb) {
    attach_dataset_counts(agent, data, env.features);
  }

  Rng train_rng = make_rng(seed).split(0x7e41);
  Rng eval_rng = make_rng(seed).split(0xe7a1);
  Rng value_rng = make_rng(seed).split(0x4a1e);

  double last_loss = 0.0;
  bool diverged = false;
  auto snapshot = [&](std::uint64_t iteration) {
    if (diverged && !result.records.empty()) {
      MetricsRecord frozen = result.records.back();
      frozen.iteration = iteration;
      result.records.push_back(frozen);
      return;
    }
    const EvalStats stats = evaluate_agent(env, agent, config.eval_episodes, eval_rng);
    MetricsRecord r;
    r.seed = seed;
    r.iteration = iteration;
    r.mean_eval_return = stats.mean_return;
    r.return_std = stats.return_std;
    r.mean_value_estimate =
        value_estimate(agent, data, config.value_estimate_minibatches,
                       agent.config.minibatch_size, value_rng);
    r.training_loss = last_loss;
    result.records.push_back(r);
  };

  snapshot(0);
  for (std::uint64_t t = 1; t <= config.iterations; ++t) {
    if (!diverged) {
      Minibatch batch =
          sample_minibatch(data, static_cast<std::size_t>(agent.config.minibatch_size),
                           train_rng);
      try {
        last_loss = agent_update(agent, batch, train_rng);
        sync_target(agent);
      } catch (const std::runtime_error&) {
        diverged = true;
        result.diverged_at = static_cast<std::int64_t>(t);
      }
    }
    if (t % config.eval_interval == 0) snapshot(t);
  }

  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

inline BatchDataset obtain_dataset(const MdpSpec& env, const ExperimentConfig& config) {
  if (!config.dataset.empty()) return load_dataset(config.dataset);
  const GenerationSpec& gen = config.generation;
  const int steps = gen.behavioral_steps > 0
                        ? gen.behavioral_steps
                        : static_cast<int>(gen.near_oracle_steps * gen.behavioral.fraction);
  BehavioralPolicy policy;
  policy.q = train_behavioral(env, steps, gen.behavioral, gen.seed);
  BatchDataset data = generate_batch(env, policy, gen.num_transitions, gen.seed);
  if (gen.require_coverage_hole && coverage_holes(data, env) == 0) {
    throw std::runtime_error(
        "generated batch has no coverage hole; benchmark config requires one");
  }
  return data;
}

inline ExperimentResult run_experiment_on(const ExperimentConfig& config,
                                          const MdpSpec& env,
                                          const BatchDataset& data);

// Full experiment: every seed, per-seed metrics files, aggregate, timing
// sidecar, run summary.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const MdpSpec env = make_env(config.env);
  const BatchDataset data = obtain_dataset(env, config);
  return run_experiment_on(config, env, data);
}

inline void write_experiment_outputs(const ExperimentConfig& config,
                                     const ExperimentResult& result);

inline ExperimentResult run_experiment_on(const ExperimentConfig& config,
                                          const MdpSpec& env,
                                          const BatchDataset& data) {
  config.validate();
  ExperimentResult result;
  result.env = config.env.empty() ? env.name : config.env;
  result.algorithm = config.algorithm;
  for (std::uint64_t seed : config.seeds) {
    result.seeds.push_back(train_offline_seed(env, data, config, seed));
  }
  if (!config.output_dir.empty()) write_experiment_outputs(config, result);
  return result;
}

inline void write_experiment_outputs(const ExperimentConfig& config,
                                     const ExperimentResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(config.output_dir);
  const std::string stem = run_stem(result.env, result.algorithm);
  std::ofstream timing(fs::path(config.output_dir) / (stem + "_timing.txt"));
  nlohmann::json summary;
  summary["env"] = result.env;
  summary["algorithm"] = algorithm_name(result.algorithm);
  for (const SeedResult& sr : result.seeds) {
    const std::string path =
        (fs::path(config.output_dir) / (stem + "_seed" + std::to_string(sr.seed) + ".csv"))
            .string();
    write_metrics_csv(path, sr.records);
    timing << "seed " << sr.seed << " wall_clock_seconds "
           << format_double(sr.wall_clock_seconds) << "\n";
    nlohmann::json js;
    js["seed"] = sr.seed;
    js["diverged_at"] = sr.diverged_at;
    js["final_return"] = sr.records.back().mean_eval_return;
    summary["seeds"].push_back(js);
  }

  // aggregate: per eval point, mean and population std across seeds
  const std::size_t points = result.seeds.front().records.size();
  for (const SeedResult& sr : result.seeds) {
    if (sr.records.size() != points) {
      throw std::runtime_error("aggregate: inconsistent eval grids across seeds");
    }
  }
  std::ofstream agg(fs::path(config.output_dir) / (stem + "_aggregate.csv"));
  agg << "iteration,mean_eval_return,return_std_across_seeds,mean_value_estimate,"
         "value_estimate_std_across_seeds\n";
  const double n = static_cast<double>(result.seeds.size());
  for (std::size_t i = 0; i < points; ++i) {
    double mr = 0.0, mv = 0.0;
    for (const SeedResult& sr : result.seeds) {
      mr += sr.records[i].mean_eval_return;
      mv += sr.records[i].mean_value_estimate;
    }
    mr /= n;
    mv /= n;
    double sr2 = 0.0, sv2 = 0.0;
    for (const SeedResult& sr : result.seeds) {
      sr2 += (sr.records[i].mean_eval_return - mr) * (sr.records[i].mean_eval_return - mr);
      sv2 += (sr.records[i].mean_value_estimate - mv) * (sr.records[i].mean_value_estimate - mv);
    }
    agg << result.seeds.front().records[i].iteration << "," << format_double(mr) << ","
        << format_double(std::sqrt(sr2 / n)) << "," << format_double(mv) << ","
        << format_double(std::sqrt(sv2 / n)) << "\n";
  }

  std::ofstream sum(fs::path(config.output_dir) / (stem + "_summary.json"));
  sum << summary.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Benchmark suite: every algorithm on the identical batch, plus behavioral
// and oracle reference lines and a ranked final-return table.
// ---------------------------------------------------------------------------

struct SuiteRow {
  std::string name;
  double final_windowed_return = 0.0;
  bool diverged = false;
};

struct SuiteResult {
  std::vector<SuiteRow> rows;              // ranked, best first
  double behavioral_return = 0.0;
  double oracle_return = 0.0;
  std::map<std::string, ExperimentResult> runs;
};

// Mean over the last `window` eval points of the across-seed mean return.
inline double final_windowed_return(const ExperimentResult& result, int window = 5) {
  const std::size_t points = result.seeds.front().records.size();
  const std::size_t w = std::min<std::size_t>(window, points);
  double sum = 0.0;
  for (std::size_t i = points - w; i < points; ++i) {
    double m = 0.0;
    for (const SeedResult& sr : result.seeds) m += sr.records[i].mean_eval_return;
    sum += m / static_cast<double>(result.seeds.size());
  }
  return sum / static_cast<double>(w);
}

struct SuiteConfig {
  ExperimentConfig base;  // env, dataset/generation, schedule, seeds, output
  std::vector<Algorithm> algorithms = {Algorithm::Dqn,    Algorithm::QrDqn,
                                       Algorithm::Rem,    Algorithm::Bcq,
                                       Algorithm::KlControl, Algorithm::Spibb};
  int reference_episodes = 200;
  int window = 5;
};

inline SuiteResult run_benchmark_suite(const SuiteConfig& suite) {
  const MdpSpec env = make_env(suite.base.env);
  ExperimentConfig base = suite.base;

  // shared dataset and reference lines
  const GenerationSpec& gen = base.generation;
  BatchDataset data;
  BehavioralPolicy policy;
  bool have_policy = false;
  if (!base.dataset.empty()) {
    data = load_dataset(base.dataset);
  } else {
    const int steps = gen.behavioral_steps > 0
                          ? gen.behavioral_steps
                          : static_cast<int>(gen.near_oracle_steps * gen.behavioral.fraction);
    policy.q = train_behavioral(env, steps, gen.behavioral, gen.seed);
    have_policy = true;
    data = generate_batch(env, policy, gen.num_transitions, gen.seed);
    if (gen.require_coverage_hole && coverage_holes(data, env) == 0) {
      throw std::runtime_error(
          "generated batch has no coverage hole; benchmark config requires one");
    }
  }

  SuiteResult result;
  Rng ref_rng = make_rng(gen.seed).split(0x5ef5);
  if (have_policy) {
    result.behavioral_return =
        evaluate_behavioral(env, policy, suite.reference_episodes, ref_rng).mean_return;
  }
  const QTable q_star = value_iteration(env, 1e-10);
  result.oracle_return =
      evaluate_rollouts(
          env,
          [&](const std::vector<double>& obs, Rng&) {
            return q_star.greedy_action(state_of(env, obs));
          },
          suite.reference_episodes, ref_rng)
          .mean_return;

  for (Algorithm algo : suite.algorithms) {
    ExperimentConfig config = base;
    config.algorithm = algo;
    ExperimentResult run;
    try {
      run = run_experiment_on(config, env, data);
    } catch (const std::exception& e) {
      SuiteRow row;
      row.name = algorithm_name(algo);
      row.diverged = true;
      row.final_windowed_return = -std::numeric_limits<double>::infinity();
      result.rows.push_back(row);
      continue;
    }
    SuiteRow row;
    row.name = algorithm_name(algo);
    row.final_windowed_return = final_windowed_return(run, suite.window);
    for (const SeedResult& sr : run.seeds) row.diverged = row.diverged || sr.diverged_at >= 0;
    result.rows.push_back(row);
    result.runs[row.name] = std::move(run);
  }
  std::stable_sort(result.rows.begin(), result.rows.end(),
                   [](const SuiteRow& a, const SuiteRow& b) {
                     return a.final_windowed_return > b.final_windowed_return;
                   });

  if (!base.output_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(base.output_dir);
    std::ofstream out(fs::path(base.output_dir) / (env.name + "_suite.csv"));
    out << "name,final_windowed_return,diverged\n";
    for (const SuiteRow& row : result.rows) {
      out << row.name << "," << format_double(row.final_windowed_return) << ","
          << (row.diverged ? 1 : 0) << "\n";
    }
    out << "behavioral," << format_double(result.behavioral_return) << ",0\n";
    out << "oracle," << format_double(result.oracle_return) << ",0\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Plot data: per (env, algorithm), across-seed mean/std series with window
// smoothing for returns and a display clip for value estimates.
// ---------------------------------------------------------------------------

inline void emit_plot_data(const std::string& metrics_dir, int window = 5,
                           double value_clip = 100.0) {
  namespace fs = std::filesystem;
  // group seed files by run stem
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& entry : fs::directory_iterator(metrics_dir)) {
    const std::string name = entry.path().filename().string();
    const auto pos = name.find("_seed");
    if (pos == std::string::npos || entry.path().extension() != ".csv") continue;
    groups[name.substr(0, pos)].push_back(entry.path().string());
  }
  if (groups.empty()) throw std::runtime_error("emit_plot_data: no metrics files in " + metrics_dir);
  for (auto& [stem, files] : groups) {
    std::sort(files.begin(), files.end());
    std::vector<std::vector<MetricsRecord>> per_seed;
    for (const std::string& f : files) per_seed.push_back(read_metrics_csv(f));
    const std::size_t points = per_seed.front().size();
    for (const auto& records : per_seed) {
      if (records.size() != points) {
        throw std::runtime_error("emit_plot_data: inconsistent eval grids across seeds for " + stem);
      }
      for (std::size_t i = 0; i < points; ++i) {
        if (records[i].iteration != per_seed.front()[i].iteration) {
          throw std::runtime_error("emit_plot_data: inconsistent eval grids across seeds for " + stem);
        }
      }
    }
    const double n = static_cast<double>(per_seed.size());
    std::ofstream out(fs::path(metrics_dir) / (stem + "_plot.csv"));
    out << "# std convention: population standard deviation across seeds\n";
    out << "# value clip for display: " << format_double(value_clip) << "\n";
    out << "iteration,return_mean,return_std,return_windowed,value_mean,value_std,"
           "value_display\n";
    std::vector<double> return_means(points);
    for (std::size_t i = 0; i < points; ++i) {
      double mr = 0.0, mv = 0.0;
      for (const auto& records : per_seed) {
        mr += records[i].mean_eval_return;
        mv += records[i].mean_value_estimate;
      }
      mr /= n;
      mv /= n;
      return_means[i] = mr;
      double sr2 = 0.0, sv2 = 0.0;
      for (const auto& records : per_seed) {
        sr2 += (records[i].mean_eval_return - mr) * (records[i].mean_eval_return - mr);
        sv2 += (records[i].mean_value_estimate - mv) * (records[i].mean_value_estimate - mv);
      }
      // sliding-window mean over the trailing `window` points
      const std::size_t w0 = i + 1 >= static_cast<std::size_t>(window)
                                 ? i + 1 - static_cast<std::size_t>(window)
                                 : 0;
      double windowed = 0.0;
      for (std::size_t j = w0; j <= i; ++j) windowed += return_means[j];
      windowed /= static_cast<double>(i - w0 + 1);
      const double display = std::clamp(mv, -value_clip, value_clip);
      out << per_seed.front()[i].iteration << "," << format_double(mr) << ","
          << format_double(std::sqrt(sr2 / n)) << "," << format_double(windowed) << ","
          << format_double(mv) << "," << format_double(std::sqrt(sv2 / n)) << ","
          << format_double(display) << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Config file parsing (JSON; keys mirror ExperimentConfig fields)
// ---------------------------------------------------------------------------

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("env")) c.env = j.at("env").get<std::string>();
  if (j.contains("algorithm")) c.algorithm = parse_algorithm(j.at("algorithm"));
  if (j.contains("agent")) c.agent = agent_config_from_json(j.at("agent"));
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
  if (j.contains("iterations")) c.iterations = j.at("iterations").get<std::uint64_t>();
  if (j.contains("eval_interval")) c.eval_interval = j.at("eval_interval").get<std::uint64_t>();
  if (j.contains("eval_episodes")) c.eval_episodes = j.at("eval_episodes").get<int>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("value_estimate_minibatches")) {
    c.value_estimate_minibatches = j.at("value_estimate_minibatches").get<int>();
  }
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("generation")) {
    const nlohmann::json& g = j.at("generation");
    if (g.contains("num_transitions")) c.generation.num_transitions = g.at("num_transitions").get<std::size_t>();
    if (g.contains("seed")) c.generation.seed = g.at("seed").get<std::uint64_t>();
    if (g.contains("behavioral_steps")) c.generation.behavioral_steps = g.at("behavioral_steps").get<int>();
    if (g.contains("near_oracle_steps")) c.generation.near_oracle_steps = g.at("near_oracle_steps").get<int>();
    if (g.contains("fraction")) c.generation.behavioral.fraction = g.at("fraction").get<double>();
    if (g.contains("learning_rate")) c.generation.behavioral.learning_rate = g.at("learning_rate").get<double>();
    if (g.contains("epsilon_decay_period")) {
      c.generation.behavioral.epsilon_decay_period = g.at("epsilon_decay_period").get<int>();
    }
    if (g.contains("require_coverage_hole")) {
      c.generation.require_coverage_hole = g.at("require_coverage_hole").get<bool>();
    }
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  nlohmann::json j;
  in >> j;
  return experiment_config_from_json(j);
}

}  // namespace batchrl
