#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "batchrl/agents.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/mdp.hpp"
#include "batchrl/net.hpp"
#include "batchrl/rng.hpp"

namespace batchrl {

// Online DQN settings for producing the partially-trained behavioral policy.
// Schedule fields are desk-scaled; the full-size values live in config files.
struct BehavioralConfig {
  int replay_buffer_size = 10000;
  int train_frequency = 4;
  int warmup_steps = 500;
  double initial_epsilon = 1.0;
  double final_epsilon = 0.01;
  int epsilon_decay_period = 5000;  // training iterations
  int target_update_rate = 200;
  int minibatch_size = 32;
  double learning_rate = 1e-3;
  double adam_epsilon = 0.00015;
  double huber_kappa = 1.0;
  std::vector<int> hidden_sizes = {32, 32};
  // "Partially trained": total steps = near_oracle_steps * fraction.
  double fraction = 0.25;
};

// Standard online DQN with a ring replay buffer and decayed epsilon-greedy
// exploration. Returns the Q-network.
inline DenseNet train_behavioral(const MdpSpec& env, int steps,
                                 const BehavioralConfig& config,
                                 std::uint64_t seed) {
  if (steps <= 0) throw std::invalid_argument("train_behavioral: steps must be > 0");
  AgentConfig agent_cfg;
  agent_cfg.algorithm = Algorithm::Dqn;
  agent_cfg.discount = env.discount;
  agent_cfg.target_update_rate = config.target_update_rate;
  agent_cfg.minibatch_size = config.minibatch_size;
  agent_cfg.huber_kappa = config.huber_kappa;
  agent_cfg.learning_rate = config.learning_rate;
  agent_cfg.adam_epsilon = config.adam_epsilon;
  agent_cfg.hidden_sizes = config.hidden_sizes;
  agent_cfg.init_seed = seed;
  AgentState agent = make_agent(agent_cfg, env.obs_dim(), env.num_actions);

  Rng rng = make_rng(seed).split(0x0be4a1);
  std::deque<Transition> buffer;
  EpisodeCursor cursor = reset(env, rng);
  int train_iterations = 0;
  for (int t = 0; t < steps; ++t) {
    double epsilon = 1.0;
    if (t >= config.warmup_steps) {
      const double frac =
          std::min(1.0, static_cast<double>(train_iterations) / config.epsilon_decay_period);
      epsilon = config.initial_epsilon + frac * (config.final_epsilon - config.initial_epsilon);
    }
    int action;
    if (rng.uniform01() < epsilon) {
      action = static_cast<int>(rng.uniform_int(env.num_actions));
    } else {
      action = static_cast<int>(argmax(agent.q.forward_raw(env.observe(cursor.state))));
    }
    const std::vector<double> obs = env.observe(cursor.state);
    const CursorStep cs = advance(env, cursor, action, rng);
    buffer.push_back({obs, action, cs.result.reward, env.observe(cs.result.next_state),
                      cs.result.done});
    if (static_cast<int>(buffer.size()) > config.replay_buffer_size) buffer.pop_front();
    if (cs.result.done || cs.truncated) cursor = reset(env, rng);

    if (t >= config.warmup_steps && t % config.train_frequency == 0) {
      Minibatch batch;
      batch.reserve(config.minibatch_size);
      for (int i = 0; i < config.minibatch_size; ++i) {
        batch.push_back(&buffer[rng.uniform_int(buffer.size())]);
      }
      const double loss = dqn_update(agent, batch);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train_behavioral: divergent loss at step " +
                                 std::to_string(t));
      }
      train_iterations += 1;
      sync_target(agent);
    }
  }
  return agent.q;
}

// Greedy Q-network with the per-episode epsilon mixture: eps_high for a whole
// episode with probability p_high, otherwise eps_low.
struct BehavioralPolicy {
  DenseNet q;
  double eps_high = 0.2;
  double p_high = 0.8;
  double eps_low = 0.001;

  double draw_episode_epsilon(Rng& rng) const {
    return rng.uniform01() < p_high ? eps_high : eps_low;
  }

  int act(const std::vector<double>& obs, double epsilon, Rng& rng) const {
    if (epsilon > 0.0 && rng.uniform01() < epsilon) {
      const int num_actions = q.output_dim();
      return static_cast<int>(rng.uniform_int(num_actions));
    }
    return static_cast<int>(argmax(q.forward_raw(obs)));
  }

  std::string descriptor() const {
    return "eps-mixture(" + std::to_string(eps_high) + "@" + std::to_string(p_high) +
           "," + std::to_string(eps_low) + "@" + std::to_string(1.0 - p_high) + ")";
  }
};

// Embeds a tabular Q as a bias-only linear network over one-hot observations.
inline DenseNet net_from_qtable(const std::vector<double>& q_values,
                                int num_states, int num_actions) {
  DenseNet net({num_states, num_actions});
  for (int a = 0; a < num_actions; ++a) {
    for (int s = 0; s < num_states; ++s) {
      net.weights(0)[static_cast<std::size_t>(a) * num_states + s] =
          q_values[static_cast<std::size_t>(s) * num_actions + a];
    }
  }
  return net;
}

struct GenerationStats {
  int episodes = 0;
  int episodes_eps_high = 0;
};

// Rolls episodes with the frozen behavioral policy, drawing the episode
// epsilon from the mixture, until num_transitions are recorded. Deterministic
// given the seed.
inline BatchDataset generate_batch(const MdpSpec& env,
                                   const BehavioralPolicy& policy,
                                   std::size_t num_transitions,
                                   std::uint64_t seed,
                                   GenerationStats* stats = nullptr) {
  if (num_transitions == 0) {
    throw std::invalid_argument("generate_batch: num_transitions must be > 0");
  }
  BatchDataset data;
  data.env_name = env.name;
  data.behavioral_policy_descriptor = policy.descriptor();
  data.seed = seed;
  data.num_actions = env.num_actions;
  data.transitions.reserve(num_transitions);

  // counts come from the true state ids, so they stay exact for dense
  // feature observations too
  data.counts.assign(
      static_cast<std::size_t>(env.num_states) * env.num_actions, 0);

  Rng rng = make_rng(seed).split(0xda7a);
  while (data.transitions.size() < num_transitions) {
    EpisodeCursor cursor = reset(env, rng);
    const double epsilon = policy.draw_episode_epsilon(rng);
    if (stats) {
      stats->episodes += 1;
      if (epsilon == policy.eps_high) stats->episodes_eps_high += 1;
    }
    while (data.transitions.size() < num_transitions) {
      const std::vector<double> obs = env.observe(cursor.state);
      const int action = policy.act(obs, epsilon, rng);
      data.counts[static_cast<std::size_t>(cursor.state) * env.num_actions +
                  action] += 1;
      const CursorStep cs = advance(env, cursor, action, rng);
      data.transitions.push_back({obs, action, cs.result.reward,
                                  env.observe(cs.result.next_state), cs.result.done});
      if (cs.result.done || cs.truncated) break;
    }
  }
  return data;
}

// Number of reachable non-terminal (s,a) pairs absent from the batch; > 0 is
// the precondition for the extrapolation-error experiments.
inline int coverage_holes(const BatchDataset& data, const MdpSpec& env) {
  if (data.counts.empty()) throw std::runtime_error("coverage_holes: no counts");
  int holes = 0;
  for (int s = 0; s < env.num_states; ++s) {
    if (env.is_terminal(s)) continue;
    // visited = any action taken from s in the batch
    bool visited = false;
    for (int a = 0; a < env.num_actions; ++a) visited = visited || data.count(s, a) > 0;
    if (!visited) continue;
    for (int a = 0; a < env.num_actions; ++a) {
      if (data.count(s, a) == 0) holes += 1;
    }
  }
  return holes;
}

}  // namespace batchrl
