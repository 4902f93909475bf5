#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "batchrl/mdp.hpp"

namespace batchrl {

// State-action value table. Fixed point of the Bellman operators below.
struct QTable {
  int num_states = 0;
  int num_actions = 0;
  std::vector<double> values;

  QTable() = default;
  QTable(int s, int a)
      : num_states(s),
        num_actions(a),
        values(static_cast<std::size_t>(s) * a, 0.0) {}

  double at(int s, int a) const { return values[static_cast<std::size_t>(s) * num_actions + a]; }
  double& at(int s, int a) { return values[static_cast<std::size_t>(s) * num_actions + a]; }

  std::vector<double> row(int s) const {
    return {values.begin() + static_cast<std::ptrdiff_t>(s) * num_actions,
            values.begin() + static_cast<std::ptrdiff_t>(s + 1) * num_actions};
  }

  double max_at(int s) const {
    double m = at(s, 0);
    for (int a = 1; a < num_actions; ++a) m = std::max(m, at(s, a));
    return m;
  }

  int greedy_action(int s) const {
    int best = 0;
    for (int a = 1; a < num_actions; ++a) {
      if (at(s, a) > at(s, best)) best = a;
    }
    return best;
  }
};

inline void check_dims(const QTable& q, const MdpSpec& spec) {
  if (q.num_states != spec.num_states || q.num_actions != spec.num_actions) {
    throw std::invalid_argument("QTable dimensions do not match MdpSpec");
  }
}

// One application of the Bellman optimality operator:
// (T* q)(s,a) = E_{s'}[ r(s,a,s') + gamma * max_a' q(s',a') ].
// Terminal next states contribute no future value.
inline QTable bellman_optimality_backup(const QTable& q, const MdpSpec& spec) {
  check_dims(q, spec);
  QTable out(spec.num_states, spec.num_actions);
  for (int s = 0; s < spec.num_states; ++s) {
    for (int a = 0; a < spec.num_actions; ++a) {
      double v = 0.0;
      for (int s2 = 0; s2 < spec.num_states; ++s2) {
        const double prob = spec.p(s, a, s2);
        if (prob == 0.0) continue;
        const double future = spec.is_terminal(s2) ? 0.0 : q.max_at(s2);
        v += prob * (spec.r(s, a, s2) + spec.discount * future);
      }
      out.at(s, a) = v;
    }
  }
  return out;
}

// One application of the policy Bellman operator with a' ~ pi(.|s').
inline QTable bellman_policy_backup(const QTable& q,
                                    const std::vector<double>& policy,
                                    const MdpSpec& spec) {
  check_dims(q, spec);
  if (policy.size() != static_cast<std::size_t>(spec.num_states) * spec.num_actions) {
    throw std::invalid_argument("bellman_policy_backup: policy size mismatch");
  }
  for (int s = 0; s < spec.num_states; ++s) {
    double sum = 0.0;
    for (int a = 0; a < spec.num_actions; ++a) {
      sum += policy[static_cast<std::size_t>(s) * spec.num_actions + a];
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("bellman_policy_backup: policy row not normalized");
    }
  }
  QTable out(spec.num_states, spec.num_actions);
  for (int s = 0; s < spec.num_states; ++s) {
    for (int a = 0; a < spec.num_actions; ++a) {
      double v = 0.0;
      for (int s2 = 0; s2 < spec.num_states; ++s2) {
        const double prob = spec.p(s, a, s2);
        if (prob == 0.0) continue;
        double future = 0.0;
        if (!spec.is_terminal(s2)) {
          for (int a2 = 0; a2 < spec.num_actions; ++a2) {
            future += policy[static_cast<std::size_t>(s2) * spec.num_actions + a2] *
                      q.at(s2, a2);
          }
        }
        v += prob * (spec.r(s, a, s2) + spec.discount * future);
      }
      out.at(s, a) = v;
    }
  }
  return out;
}

// Iterate T* to its fixed point; gamma < 1 guarantees contraction.
inline QTable value_iteration(const MdpSpec& spec, double tolerance = 1e-10) {
  if (tolerance <= 0.0) {
    throw std::invalid_argument("value_iteration: tolerance must be > 0");
  }
  QTable q(spec.num_states, spec.num_actions);
  while (true) {
    QTable next = bellman_optimality_backup(q, spec);
    double diff = 0.0;
    for (std::size_t i = 0; i < q.values.size(); ++i) {
      diff = std::max(diff, std::abs(next.values[i] - q.values[i]));
    }
    q = std::move(next);
    if (diff < tolerance) break;
  }
  return q;
}

// Deterministic greedy policy table for a Q-table (lowest index wins ties).
inline std::vector<double> greedy_policy(const QTable& q) {
  std::vector<double> pi(q.values.size(), 0.0);
  for (int s = 0; s < q.num_states; ++s) {
    pi[static_cast<std::size_t>(s) * q.num_actions + q.greedy_action(s)] = 1.0;
  }
  return pi;
}

// Fixed point of T^pi, by iteration.
inline QTable policy_evaluation(const std::vector<double>& policy,
                                const MdpSpec& spec, double tolerance = 1e-10) {
  QTable q(spec.num_states, spec.num_actions);
  while (true) {
    QTable next = bellman_policy_backup(q, policy, spec);
    double diff = 0.0;
    for (std::size_t i = 0; i < q.values.size(); ++i) {
      diff = std::max(diff, std::abs(next.values[i] - q.values[i]));
    }
    q = std::move(next);
    if (diff < tolerance) break;
  }
  return q;
}

}  // namespace batchrl
