#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "batchrl/rng.hpp"

namespace batchrl {

// Tabular MDP with explicit transition and reward tables.
// Immutable after construction; episode state lives in EpisodeCursor.
struct MdpSpec {
  std::string name;
  int num_states = 0;
  int num_actions = 0;
  std::vector<double> transition;  // [s][a][s'] row-major
  std::vector<double> reward;      // [s][a][s']
  double discount = 0.99;
  std::set<int> terminal;
  std::vector<double> initial_distribution;
  int max_episode_steps = 200;
  bool clip_rewards = false;
  // Optional dense features per state; empty means one-hot observations.
  std::vector<std::vector<double>> features;

  double p(int s, int a, int s2) const {
    return transition[(static_cast<std::size_t>(s) * num_actions + a) *
                          num_states +
                      s2];
  }
  double& p(int s, int a, int s2) {
    return transition[(static_cast<std::size_t>(s) * num_actions + a) *
                          num_states +
                      s2];
  }
  double r(int s, int a, int s2) const {
    return reward[(static_cast<std::size_t>(s) * num_actions + a) * num_states +
                  s2];
  }
  double& r(int s, int a, int s2) {
    return reward[(static_cast<std::size_t>(s) * num_actions + a) * num_states +
                  s2];
  }

  bool is_terminal(int s) const { return terminal.count(s) > 0; }

  int obs_dim() const {
    return features.empty() ? num_states : static_cast<int>(features[0].size());
  }

  std::vector<double> observe(int s) const {
    if (!features.empty()) return features[s];
    std::vector<double> obs(num_states, 0.0);
    obs[s] = 1.0;
    return obs;
  }

  double max_abs_reward() const {
    double m = 0.0;
    for (double x : reward) m = std::max(m, std::abs(x));
    if (clip_rewards) m = std::min(m, 1.0);
    return m;
  }

  // Analytic bound on any true discounted return; estimates above it
  // certify divergence.
  double value_bound() const { return max_abs_reward() / (1.0 - discount); }

  void validate() const {
    if (num_states <= 0 || num_actions <= 0) {
      throw std::invalid_argument("MdpSpec: num_states and num_actions must be positive");
    }
    if (discount < 0.0 || discount >= 1.0) {
      throw std::invalid_argument("MdpSpec: discount must be in [0,1)");
    }
    const std::size_t table = static_cast<std::size_t>(num_states) *
                              num_actions * num_states;
    if (transition.size() != table || reward.size() != table) {
      throw std::invalid_argument("MdpSpec: table size mismatch");
    }
    for (int s = 0; s < num_states; ++s) {
      for (int a = 0; a < num_actions; ++a) {
        double sum = 0.0;
        for (int s2 = 0; s2 < num_states; ++s2) sum += p(s, a, s2);
        if (std::abs(sum - 1.0) > 1e-12) {
          throw std::invalid_argument("MdpSpec: transition row does not sum to 1");
        }
      }
    }
    if (initial_distribution.size() != static_cast<std::size_t>(num_states)) {
      throw std::invalid_argument("MdpSpec: initial_distribution size mismatch");
    }
    double isum = 0.0;
    for (double x : initial_distribution) isum += x;
    if (std::abs(isum - 1.0) > 1e-12) {
      throw std::invalid_argument("MdpSpec: initial_distribution does not sum to 1");
    }
    for (int t : terminal) {
      if (t < 0 || t >= num_states) {
        throw std::invalid_argument("MdpSpec: terminal state out of range");
      }
      for (int a = 0; a < num_actions; ++a) {
        if (std::abs(p(t, a, t) - 1.0) > 1e-12 || std::abs(r(t, a, t)) > 0.0) {
          throw std::invalid_argument(
              "MdpSpec: terminal states must self-loop with reward 0");
        }
      }
    }
    if (!features.empty() &&
        features.size() != static_cast<std::size_t>(num_states)) {
      throw std::invalid_argument("MdpSpec: features size mismatch");
    }
  }
};

struct StepResult {
  int next_state;
  double reward;
  bool done;  // true termination only
};

inline StepResult step(const MdpSpec& spec, int state, int action, Rng& rng) {
  if (state < 0 || state >= spec.num_states) {
    throw std::invalid_argument("step: state out of range");
  }
  if (action < 0 || action >= spec.num_actions) {
    throw std::invalid_argument("step: action out of range");
  }
  const double u = rng.uniform01();
  double cum = 0.0;
  int next = spec.num_states - 1;
  for (int s2 = 0; s2 < spec.num_states; ++s2) {
    cum += spec.p(state, action, s2);
    if (u < cum) {
      next = s2;
      break;
    }
  }
  double rew = spec.r(state, action, next);
  if (spec.clip_rewards) rew = std::clamp(rew, -1.0, 1.0);
  return {next, rew, spec.is_terminal(next)};
}

// Per-episode mutable state; each run owns its own cursor and rng.
struct EpisodeCursor {
  int state = 0;
  int steps = 0;
};

inline EpisodeCursor reset(const MdpSpec& spec, Rng& rng) {
  const double u = rng.uniform01();
  double cum = 0.0;
  EpisodeCursor cursor;
  cursor.state = spec.num_states - 1;
  for (int s = 0; s < spec.num_states; ++s) {
    cum += spec.initial_distribution[s];
    if (u < cum) {
      cursor.state = s;
      break;
    }
  }
  return cursor;
}

struct CursorStep {
  StepResult result;
  bool truncated;  // hit the episode cap; bootstrap is NOT cut on truncation
};

inline CursorStep advance(const MdpSpec& spec, EpisodeCursor& cursor,
                          int action, Rng& rng) {
  StepResult res = step(spec, cursor.state, action, rng);
  cursor.state = res.next_state;
  cursor.steps += 1;
  const bool truncated = !res.done && cursor.steps >= spec.max_episode_steps;
  return {res, truncated};
}

// ---------------------------------------------------------------------------
// Built-in environments
// ---------------------------------------------------------------------------

// Deterministic N-state chain: actions {0: left, 1: right}, start at state 0,
// terminal at state N-1 with reward 1 on the transition into it.
inline MdpSpec chain_mdp(int n, double discount = 0.99) {
  if (n < 2) throw std::invalid_argument("chain_mdp: need at least 2 states");
  MdpSpec spec;
  spec.name = "chain" + std::to_string(n);
  spec.num_states = n;
  spec.num_actions = 2;
  spec.discount = discount;
  spec.transition.assign(static_cast<std::size_t>(n) * 2 * n, 0.0);
  spec.reward.assign(static_cast<std::size_t>(n) * 2 * n, 0.0);
  spec.terminal = {n - 1};
  spec.initial_distribution.assign(n, 0.0);
  spec.initial_distribution[0] = 1.0;
  for (int s = 0; s < n - 1; ++s) {
    spec.p(s, 0, std::max(0, s - 1)) = 1.0;
    spec.p(s, 1, s + 1) = 1.0;
    if (s + 1 == n - 1) spec.r(s, 1, s + 1) = 1.0;
  }
  spec.p(n - 1, 0, n - 1) = 1.0;
  spec.p(n - 1, 1, n - 1) = 1.0;
  spec.validate();
  return spec;
}

// Cliff-style gridworld. Bottom row between start and goal is a penalty
// region: stepping in ends the episode with reward -1. Reaching the goal
// yields +1. Every other move costs step_penalty. With slip > 0 the agent
// moves perpendicular to the intended direction with probability slip
// (split evenly between the two sides).
inline MdpSpec cliff_grid_mdp(int width, int height, double slip = 0.0,
                              double discount = 0.99,
                              double step_penalty = -0.01) {
  if (width < 3 || height < 2) {
    throw std::invalid_argument("cliff_grid_mdp: grid too small");
  }
  MdpSpec spec;
  spec.name = slip > 0.0 ? "cliff_slip" : "cliff";
  const int n = width * height;
  spec.num_states = n;
  spec.num_actions = 4;  // 0 up, 1 right, 2 down, 3 left
  spec.discount = discount;
  spec.transition.assign(static_cast<std::size_t>(n) * 4 * n, 0.0);
  spec.reward.assign(static_cast<std::size_t>(n) * 4 * n, 0.0);
  spec.initial_distribution.assign(n, 0.0);

  auto id = [width](int x, int y) { return y * width + x; };
  const int start = id(0, 0);
  const int goal = id(width - 1, 0);
  spec.initial_distribution[start] = 1.0;
  std::set<int> cliff;
  for (int x = 1; x < width - 1; ++x) cliff.insert(id(x, 0));
  spec.terminal.insert(goal);
  for (int c : cliff) spec.terminal.insert(c);

  const int dx[4] = {0, 1, 0, -1};
  const int dy[4] = {1, 0, -1, 0};
  auto move = [&](int x, int y, int a) {
    int nx = std::clamp(x + dx[a], 0, width - 1);
    int ny = std::clamp(y + dy[a], 0, height - 1);
    return id(nx, ny);
  };

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int s = id(x, y);
      if (spec.is_terminal(s)) {
        for (int a = 0; a < 4; ++a) spec.p(s, a, s) = 1.0;
        continue;
      }
      for (int a = 0; a < 4; ++a) {
        // intended move plus perpendicular slips
        const int sides[2] = {(a + 1) % 4, (a + 3) % 4};
        spec.p(s, a, move(x, y, a)) += 1.0 - slip;
        spec.p(s, a, move(x, y, sides[0])) += slip / 2.0;
        spec.p(s, a, move(x, y, sides[1])) += slip / 2.0;
      }
      for (int a = 0; a < 4; ++a) {
        for (int s2 = 0; s2 < n; ++s2) {
          if (spec.p(s, a, s2) == 0.0) continue;
          if (cliff.count(s2)) {
            spec.r(s, a, s2) = -1.0;
          } else if (s2 == goal) {
            spec.r(s, a, s2) = 1.0;
          } else {
            spec.r(s, a, s2) = step_penalty;
          }
        }
      }
    }
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Registry and serialization
// ---------------------------------------------------------------------------

// Cliff grid with dense coordinate observations instead of one-hot. Nearby
// states share features, so the approximator genuinely extrapolates to
// state-action pairs missing from a batch.
inline MdpSpec cliff_dense_mdp(int width = 6, int height = 4) {
  MdpSpec spec = cliff_grid_mdp(width, height);
  spec.name = "cliff_dense";
  // factored row/column encoding: states in the same column or row share
  // coordinates, so the approximator generalizes (and extrapolates) across
  // them, unlike the default one-hot observation
  spec.features.resize(spec.num_states);
  for (int s = 0; s < spec.num_states; ++s) {
    std::vector<double> f(width + height, 0.0);
    f[s % width] = 1.0;
    f[width + s / width] = 1.0;
    spec.features[s] = f;
  }
  return spec;
}

inline const std::map<std::string, std::function<MdpSpec()>>& env_registry() {
  static const std::map<std::string, std::function<MdpSpec()>> registry = {
      {"chain5", [] { return chain_mdp(5); }},
      {"chain10", [] { return chain_mdp(10); }},
      {"cliff", [] { return cliff_grid_mdp(6, 4); }},
      {"cliff_slip", [] { return cliff_grid_mdp(6, 4, 0.1); }},
      {"cliff_dense", [] { return cliff_dense_mdp(); }},
  };
  return registry;
}

inline MdpSpec make_env(const std::string& name) {
  const auto& registry = env_registry();
  auto it = registry.find(name);
  if (it == registry.end()) {
    // Fall back to a spec file on disk for custom environments.
    std::ifstream in(name);
    if (!in) throw std::invalid_argument("unknown environment: " + name);
    nlohmann::json j;
    in >> j;
    MdpSpec spec;
    spec.name = name;
    spec.num_states = j.at("num_states").get<int>();
    spec.num_actions = j.at("num_actions").get<int>();
    spec.transition = j.at("transition").get<std::vector<double>>();
    spec.reward = j.at("reward").get<std::vector<double>>();
    spec.discount = j.at("discount").get<double>();
    for (int t : j.at("terminal").get<std::vector<int>>()) spec.terminal.insert(t);
    spec.initial_distribution =
        j.at("initial_distribution").get<std::vector<double>>();
    if (j.contains("max_episode_steps")) {
      spec.max_episode_steps = j.at("max_episode_steps").get<int>();
    }
    spec.validate();
    return spec;
  }
  return it->second();
}

// Maps an observation back to its state id (works for one-hot and dense
// feature encodings).
inline int state_of(const MdpSpec& spec, const std::vector<double>& obs) {
  if (spec.features.empty()) {
    int id = -1;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (obs[i] == 1.0) {
        if (id >= 0) return -1;
        id = static_cast<int>(i);
      } else if (obs[i] != 0.0) {
        return -1;
      }
    }
    return id;
  }
  for (int s = 0; s < spec.num_states; ++s) {
    if (spec.features[s] == obs) return s;
  }
  return -1;
}

inline void save_mdp(const MdpSpec& spec, const std::string& path) {
  nlohmann::json j;
  j["num_states"] = spec.num_states;
  j["num_actions"] = spec.num_actions;
  j["transition"] = spec.transition;
  j["reward"] = spec.reward;
  j["discount"] = spec.discount;
  j["terminal"] = std::vector<int>(spec.terminal.begin(), spec.terminal.end());
  j["initial_distribution"] = spec.initial_distribution;
  j["max_episode_steps"] = spec.max_episode_steps;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_mdp: cannot open " + path);
  out << j.dump(2) << "\n";
}

}  // namespace batchrl
