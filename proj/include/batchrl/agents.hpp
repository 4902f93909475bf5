#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "batchrl/adam.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/losses.hpp"
#include "batchrl/net.hpp"
#include "batchrl/rng.hpp"

namespace batchrl {

enum class Algorithm { Dqn, QrDqn, Rem, Bcq, KlControl, Spibb };

inline std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Dqn: return "dqn";
    case Algorithm::QrDqn: return "qrdqn";
    case Algorithm::Rem: return "rem";
    case Algorithm::Bcq: return "bcq";
    case Algorithm::KlControl: return "klcontrol";
    case Algorithm::Spibb: return "spibb";
  }
  throw std::logic_error("algorithm_name: bad tag");
}

inline Algorithm parse_algorithm(const std::string& name) {
  if (name == "dqn") return Algorithm::Dqn;
  if (name == "qrdqn") return Algorithm::QrDqn;
  if (name == "rem") return Algorithm::Rem;
  if (name == "bcq") return Algorithm::Bcq;
  if (name == "klcontrol") return Algorithm::KlControl;
  if (name == "spibb") return Algorithm::Spibb;
  throw std::invalid_argument("unknown algorithm: " + name);
}

// Defaults follow the published hyper-parameter tables; desk-scale runs
// override the schedule-sized fields through the experiment config.
struct AgentConfig {
  Algorithm algorithm = Algorithm::Dqn;
  double discount = 0.99;
  int target_update_rate = 8000;
  int minibatch_size = 32;
  double huber_kappa = 1.0;
  double eval_epsilon = 0.001;
  double learning_rate = 0.0000625;
  double adam_epsilon = 0.00015;
  std::vector<int> hidden_sizes = {32, 32};
  std::uint64_t init_seed = 1;

  int quantile_count = 50;       // QR-DQN
  int rem_heads = 200;           // REM
  double bcq_threshold = 0.3;    // BCQ
  int dropout_masks = 5;         // KL-Control
  double kl_weight = 2.0;        // KL-Control c
  double grad_clip = 1.0;        // KL-Control, global norm
  double dropout_probability = 0.2;
  double spibb_count_threshold = 5.0;    // bootstrapped set: n(s,a) <= threshold
  bool spibb_sample_next_action = false; // default: exact expectation over pi
  double g_penalty = 0.01;       // final pre-activation penalty coefficient
  bool share_encoder = true;     // share first hidden layer between Q and G

  void validate() const {
    if (discount < 0.0 || discount >= 1.0) throw std::invalid_argument("discount must be in [0,1)");
    if (bcq_threshold < 0.0 || bcq_threshold > 1.0) throw std::invalid_argument("bcq_threshold must be in [0,1]");
    if (target_update_rate <= 0 || minibatch_size <= 0 || quantile_count <= 0 ||
        rem_heads <= 0 || dropout_masks <= 0) {
      throw std::invalid_argument("agent counts must be positive");
    }
  }

  bool needs_generative_model() const {
    return algorithm == Algorithm::Bcq || algorithm == Algorithm::KlControl ||
           algorithm == Algorithm::Spibb;
  }

  int head_count() const {
    switch (algorithm) {
      case Algorithm::QrDqn: return quantile_count;
      case Algorithm::Rem: return rem_heads;
      default: return 1;
    }
  }
};

using Minibatch = std::vector<const Transition*>;

struct GradResult {
  double loss = 0.0;
  std::vector<double> grad;
};

// Per-algorithm state bundle: online net, target net, optional generative
// model and its optimizer, iteration counter.
struct AgentState {
  AgentConfig config;
  int num_actions = 0;
  int obs_dim = 0;
  DenseNet q;
  DenseNet target;
  bool has_g = false;
  DenseNet g;
  AdamState adam_q;
  AdamState adam_g;
  AdamState adam_trunk;  // shared-encoder gradient from the cloning loss
  std::uint64_t iteration = 0;

  // Tabular side data for SPIBB: exact batch counts and an optional true
  // baseline policy (row-major [num_states x num_actions]).
  std::vector<std::uint64_t> counts;
  int count_states = 0;
  std::optional<std::vector<double>> true_baseline;
  // observation -> state id for dense feature envs; empty means one-hot
  std::map<std::vector<double>, int> state_index;

  int tabular_state(const std::vector<double>& obs) const {
    if (!state_index.empty()) {
      const auto it = state_index.find(obs);
      return it == state_index.end() ? -1 : it->second;
    }
    return one_hot_state(obs);
  }

  // Probabilities of the generative model at an observation.
  std::vector<double> g_probs(const std::vector<double>& obs) const {
    return softmax(g_logits(obs));
  }

  std::vector<double> g_logits(const std::vector<double>& obs) const {
    if (!has_g) throw std::logic_error("agent has no generative model");
    if (config.share_encoder && !config.hidden_sizes.empty()) {
      return g.forward_raw(trunk_activation(obs));
    }
    return g.forward_raw(obs);
  }

  // First hidden layer of the Q-network (the shared encoder).
  std::vector<double> trunk_activation(const std::vector<double>& obs) const {
    const int out = q.layer_sizes()[1];
    const int in = q.layer_sizes()[0];
    const double* w = q.weights(0);
    const double* b = q.biases(0);
    std::vector<double> h(out);
    for (int o = 0; o < out; ++o) {
      double acc = b[o];
      const double* row = w + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < static_cast<int>(obs.size()); ++i) acc += row[i] * obs[i];
      h[o] = acc > 0.0 ? acc : 0.0;
    }
    return h;
  }
};

inline AgentState make_agent(const AgentConfig& config, int obs_dim,
                             int num_actions) {
  config.validate();
  AgentState state;
  state.config = config;
  state.num_actions = num_actions;
  state.obs_dim = obs_dim;

  std::vector<int> sizes;
  sizes.push_back(obs_dim);
  for (int h : config.hidden_sizes) sizes.push_back(h);
  sizes.push_back(num_actions * config.head_count());
  state.q = DenseNet(sizes, config.head_count());

  Rng rng = make_rng(config.init_seed);
  state.q.init_he_uniform(rng);
  state.target = state.q;
  state.adam_q = AdamState(state.q.param_count(), config.learning_rate,
                           config.adam_epsilon);

  if (config.needs_generative_model()) {
    state.has_g = true;
    std::vector<int> g_sizes;
    if (config.share_encoder && !config.hidden_sizes.empty()) {
      for (std::size_t i = 1; i < sizes.size() - 1; ++i) g_sizes.push_back(sizes[i]);
    } else {
      g_sizes.push_back(obs_dim);
      for (int h : config.hidden_sizes) g_sizes.push_back(h);
    }
    g_sizes.push_back(num_actions);
    state.g = DenseNet(g_sizes, 1, OutputHead::Softmax);
    state.g.init_he_uniform(rng);
    state.adam_g = AdamState(state.g.param_count(), config.learning_rate,
                             config.adam_epsilon);
    if (config.share_encoder && !config.hidden_sizes.empty()) {
      state.adam_trunk = AdamState(state.q.param_count(), config.learning_rate,
                                   config.adam_epsilon);
    }
  }
  return state;
}

// SPIBB and the coverage diagnostics need the batch's exact counts. For
// dense feature envs, pass the feature table so observations can be mapped
// back to state ids.
inline void attach_dataset_counts(
    AgentState& state, const BatchDataset& data,
    const std::vector<std::vector<double>>& features = {}) {
  if (data.counts.empty()) {
    throw std::runtime_error(
        "attach_dataset_counts: dataset has no tabular counts");
  }
  state.counts = data.counts;
  state.count_states = static_cast<int>(data.counts.size()) / data.num_actions;
  state.state_index.clear();
  for (std::size_t s = 0; s < features.size(); ++s) {
    state.state_index[features[s]] = static_cast<int>(s);
  }
}

// ---------------------------------------------------------------------------
// Q-loss gradients. Each routine returns the mean minibatch loss and the
// exact gradient over the online network's flat parameter vector; the update
// entry points below pair them with an Adam step.
// ---------------------------------------------------------------------------

namespace agent_detail {

inline void check_nonempty(const Minibatch& batch) {
  if (batch.empty()) throw std::invalid_argument("update: empty minibatch");
}

inline void accumulate(GradResult& acc, const DenseNet& net,
                       const DenseNet::ForwardCache& cache,
                       const std::vector<double>& upstream) {
  DenseNet::BackwardResult b = net.backward(cache, upstream);
  for (std::size_t i = 0; i < acc.grad.size(); ++i) acc.grad[i] += b.param_grad[i];
}

}  // namespace agent_detail

// Standard DQN target: r + gamma * max_a' Q_target(s',a'), bootstrap cut on
// done. With `double_dqn`, the argmax comes from the online network and the
// target network only evaluates it.
inline GradResult dqn_minibatch_gradient(const AgentState& state,
                                         const Minibatch& batch,
                                         bool double_dqn = false) {
  agent_detail::check_nonempty(batch);
  const AgentConfig& cfg = state.config;
  GradResult res;
  res.grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Transition* t : batch) {
    double target = t->reward;
    if (!t->done) {
      const std::vector<double> next_q = state.target.forward_raw(t->next_state);
      if (double_dqn) {
        const std::size_t a2 = argmax(state.q.forward_raw(t->next_state));
        target += cfg.discount * next_q[a2];
      } else {
        target += cfg.discount * *std::max_element(next_q.begin(), next_q.end());
      }
    }
    DenseNet::ForwardCache cache;
    const std::vector<double> q_s = state.q.forward_raw(t->state, nullptr, &cache);
    const double delta = target - q_s[t->action];
    const LossValue lv = huber_loss(delta, cfg.huber_kappa);
    res.loss += lv.loss * inv_n;
    std::vector<double> upstream(q_s.size(), 0.0);
    upstream[t->action] = -lv.derivative * inv_n;
    agent_detail::accumulate(res, state.q, cache, upstream);
  }
  return res;
}

// Quantile midpoints {(i+0.5)/K}.
inline std::vector<double> quantile_midpoints(int k) {
  std::vector<double> taus(k);
  for (int i = 0; i < k; ++i) taus[i] = (i + 0.5) / k;
  return taus;
}

// Pairwise quantile-Huber loss over all K^2 quantile pairs. The next action
// is the target network's mean-over-quantiles argmax; all target quantiles
// are indexed at that single action.
inline GradResult qrdqn_minibatch_gradient(const AgentState& state,
                                           const Minibatch& batch) {
  agent_detail::check_nonempty(batch);
  const AgentConfig& cfg = state.config;
  const int k = cfg.quantile_count;
  const std::vector<double> taus = quantile_midpoints(k);
  GradResult res;
  res.grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double inv_k2 = 1.0 / static_cast<double>(k) / static_cast<double>(k);
  for (const Transition* t : batch) {
    std::vector<double> target_quantiles(k, t->reward);
    if (!t->done) {
      const std::vector<double> next_out = state.target.forward_raw(t->next_state);
      const std::size_t a2 = argmax(action_values(next_out, k));
      for (int j = 0; j < k; ++j) {
        target_quantiles[j] += cfg.discount * next_out[a2 * k + j];
      }
    }
    DenseNet::ForwardCache cache;
    const std::vector<double> out = state.q.forward_raw(t->state, nullptr, &cache);
    std::vector<double> upstream(out.size(), 0.0);
    for (int i = 0; i < k; ++i) {
      const double q_i = out[static_cast<std::size_t>(t->action) * k + i];
      double dsum = 0.0;
      for (int j = 0; j < k; ++j) {
        const LossValue lv =
            quantile_huber_loss(target_quantiles[j] - q_i, taus[i], cfg.huber_kappa);
        res.loss += lv.loss * inv_k2 * inv_n;
        dsum += lv.derivative;
      }
      upstream[static_cast<std::size_t>(t->action) * k + i] = -dsum * inv_k2 * inv_n;
    }
    agent_detail::accumulate(res, state.q, cache, upstream);
  }
  return res;
}

// Huber loss on the alpha-weighted combination of the K heads; one alpha per
// minibatch.
inline GradResult rem_minibatch_gradient(const AgentState& state,
                                         const Minibatch& batch,
                                         const std::vector<double>& alpha) {
  agent_detail::check_nonempty(batch);
  const AgentConfig& cfg = state.config;
  const int k = cfg.rem_heads;
  if (alpha.size() != static_cast<std::size_t>(k)) {
    throw std::invalid_argument("rem: alpha size mismatch");
  }
  GradResult res;
  res.grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  auto combine = [&](const std::vector<double>& out, int action) {
    double v = 0.0;
    for (int h = 0; h < k; ++h) v += alpha[h] * out[static_cast<std::size_t>(action) * k + h];
    return v;
  };
  for (const Transition* t : batch) {
    double target = t->reward;
    if (!t->done) {
      const std::vector<double> next_out = state.target.forward_raw(t->next_state);
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < state.num_actions; ++a) best = std::max(best, combine(next_out, a));
      target += cfg.discount * best;
    }
    DenseNet::ForwardCache cache;
    const std::vector<double> out = state.q.forward_raw(t->state, nullptr, &cache);
    const double delta = target - combine(out, t->action);
    const LossValue lv = huber_loss(delta, cfg.huber_kappa);
    res.loss += lv.loss * inv_n;
    std::vector<double> upstream(out.size(), 0.0);
    for (int h = 0; h < k; ++h) {
      upstream[static_cast<std::size_t>(t->action) * k + h] = -lv.derivative * alpha[h] * inv_n;
    }
    agent_detail::accumulate(res, state.q, cache, upstream);
  }
  return res;
}

// Uniform draw from the (K-1)-simplex via normalized unit exponentials.
inline std::vector<double> sample_simplex(int k, Rng& rng) {
  std::vector<double> alpha(k);
  double sum = 0.0;
  for (double& a : alpha) {
    a = rng.exponential();
    sum += a;
  }
  for (double& a : alpha) a /= sum;
  return alpha;
}

// Constrained argmax: actions whose generative-model probability ratio
// clears the threshold compete on Q-value. The g-argmax always qualifies
// (ratio 1 >= tau for tau in [0,1]), so the operation is total.
inline int bcq_constrained_argmax(const std::vector<double>& q_values,
                                  const std::vector<double>& g_probs,
                                  double bcq_threshold) {
  if (q_values.size() != g_probs.size() || q_values.empty()) {
    throw std::invalid_argument("bcq_constrained_argmax: size mismatch");
  }
  const double g_max = *std::max_element(g_probs.begin(), g_probs.end());
  int best = -1;
  for (std::size_t a = 0; a < q_values.size(); ++a) {
    if (g_probs[a] / g_max < bcq_threshold) continue;
    if (best < 0 || q_values[a] > q_values[best]) best = static_cast<int>(a);
  }
  return best;
}

// BCQ Q-loss: next action by constrained argmax over the ONLINE network,
// evaluated by the target network (Double-DQN style).
inline GradResult bcq_minibatch_gradient(const AgentState& state,
                                         const Minibatch& batch,
                                         std::vector<int>* selected_actions = nullptr) {
  agent_detail::check_nonempty(batch);
  const AgentConfig& cfg = state.config;
  GradResult res;
  res.grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Transition* t : batch) {
    double target = t->reward;
    if (!t->done) {
      const int a2 = bcq_constrained_argmax(state.q.forward_raw(t->next_state),
                                            state.g_probs(t->next_state),
                                            cfg.bcq_threshold);
      if (selected_actions) selected_actions->push_back(a2);
      target += cfg.discount * state.target.forward_raw(t->next_state)[a2];
    }
    DenseNet::ForwardCache cache;
    const std::vector<double> q_s = state.q.forward_raw(t->state, nullptr, &cache);
    const double delta = target - q_s[t->action];
    const LossValue lv = huber_loss(delta, cfg.huber_kappa);
    res.loss += lv.loss * inv_n;
    std::vector<double> upstream(q_s.size(), 0.0);
    upstream[t->action] = -lv.derivative * inv_n;
    agent_detail::accumulate(res, state.q, cache, upstream);
  }
  return res;
}

// Behavioral-cloning loss: cross-entropy on the observed action plus the
// final pre-activation penalty coef * x^2. Returns gradients for the G
// parameters and, with a shared encoder, for the Q-network's first layer.
struct BcGradResult {
  double loss = 0.0;
  std::vector<double> g_grad;
  std::vector<double> trunk_grad;  // sized like q params; empty when unshared
};

inline BcGradResult bc_minibatch_gradient(const AgentState& state,
                                          const Minibatch& batch) {
  agent_detail::check_nonempty(batch);
  if (!state.has_g) throw std::logic_error("bc_update: agent has no generative model");
  const AgentConfig& cfg = state.config;
  const bool shared = cfg.share_encoder && !cfg.hidden_sizes.empty();
  BcGradResult res;
  res.g_grad.assign(state.g.param_count(), 0.0);
  if (shared) res.trunk_grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Transition* t : batch) {
    const std::vector<double> input =
        shared ? state.trunk_activation(t->state) : t->state;
    DenseNet::ForwardCache cache;
    const std::vector<double> logits = state.g.forward_raw(input, nullptr, &cache);
    const CrossEntropyResult ce = cross_entropy_loss(logits, t->action);
    double penalty = 0.0;
    std::vector<double> upstream = ce.grad_logits;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      penalty += cfg.g_penalty * logits[i] * logits[i];
      upstream[i] += 2.0 * cfg.g_penalty * logits[i];
    }
    res.loss += (ce.loss + penalty) * inv_n;
    for (double& u : upstream) u *= inv_n;
    DenseNet::BackwardResult b = state.g.backward(cache, upstream);
    for (std::size_t i = 0; i < res.g_grad.size(); ++i) res.g_grad[i] += b.param_grad[i];
    if (shared) {
      // push the input gradient through the trunk layer of the Q-network
      const int in = state.q.layer_sizes()[0];
      const int out = state.q.layer_sizes()[1];
      const double* w = state.q.weights(0);
      const double* b0 = state.q.biases(0);
      double* gw = res.trunk_grad.data();
      double* gb = res.trunk_grad.data() + static_cast<std::size_t>(in) * out;
      for (int o = 0; o < out; ++o) {
        double pre = b0[o];
        const double* row = w + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) pre += row[i] * t->state[i];
        if (pre <= 0.0) continue;  // rectifier gate
        const double go = b.input_grad[o];
        gb[o] += go;
        double* grow = gw + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) grow[i] += go * t->state[i];
      }
    }
  }
  return res;
}

// KL-regularized target: log G(a|s) + r/c + gamma * min over K dropout masks
// of logsumexp_a' Q_target(s',a'). The generative model is detached; the
// online forward uses one independent mask.
inline GradResult klcontrol_minibatch_gradient(const AgentState& state,
                                               const Minibatch& batch,
                                               Rng& rng) {
  agent_detail::check_nonempty(batch);
  if (!state.has_g) throw std::logic_error("klcontrol: agent has no generative model");
  const AgentConfig& cfg = state.config;
  GradResult res;
  res.grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Transition* t : batch) {
    const std::vector<double> probs = state.g_probs(t->state);
    double target = std::log(probs[t->action]) + t->reward / cfg.kl_weight;
    if (!t->done) {
      double lower = std::numeric_limits<double>::infinity();
      for (int m = 0; m < cfg.dropout_masks; ++m) {
        const DropoutSpec mask =
            sample_dropout(state.target, cfg.dropout_probability, rng);
        lower = std::min(lower, logsumexp(state.target.forward_raw(t->next_state, &mask)));
      }
      target += cfg.discount * lower;
    }
    const DropoutSpec online_mask =
        sample_dropout(state.q, cfg.dropout_probability, rng);
    DenseNet::ForwardCache cache;
    const std::vector<double> q_s =
        state.q.forward_raw(t->state, &online_mask, &cache);
    const double delta = target - q_s[t->action];
    const LossValue lv = huber_loss(delta, cfg.huber_kappa);
    res.loss += lv.loss * inv_n;
    std::vector<double> upstream(q_s.size(), 0.0);
    upstream[t->action] = -lv.derivative * inv_n;
    agent_detail::accumulate(res, state.q, cache, upstream);
  }
  return res;
}

// SPIBB policy at one state: bootstrapped actions keep the baseline mass,
// the best non-bootstrapped action collects the rest.
inline std::vector<double> spibb_policy(const std::vector<double>& q_values,
                                        const std::vector<double>& baseline_probs,
                                        const std::vector<std::uint64_t>& counts,
                                        double count_threshold) {
  const std::size_t n = q_values.size();
  if (baseline_probs.size() != n || counts.size() != n) {
    throw std::invalid_argument("spibb_policy: size mismatch");
  }
  double bsum = 0.0;
  for (double p : baseline_probs) bsum += p;
  if (std::abs(bsum - 1.0) > 1e-9) {
    throw std::invalid_argument("spibb_policy: baseline not normalized");
  }
  std::vector<double> pi(n, 0.0);
  int best_free = -1;
  double free_mass = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    if (static_cast<double>(counts[a]) <= count_threshold) {
      pi[a] = baseline_probs[a];  // bootstrapped: defer to the baseline
    } else {
      free_mass += baseline_probs[a];
      if (best_free < 0 || q_values[a] > q_values[best_free]) {
        best_free = static_cast<int>(a);
      }
    }
  }
  if (best_free < 0) return baseline_probs;  // everything bootstrapped
  pi[best_free] = free_mass;
  return pi;
}

// Baseline probabilities at an observation: the injected true baseline when
// present, otherwise the cloned behavioral estimate G.
inline std::vector<double> spibb_baseline(const AgentState& state,
                                          const std::vector<double>& obs) {
  if (state.true_baseline) {
    const int s = state.tabular_state(obs);
    if (s < 0) throw std::runtime_error("spibb: cannot map observation to a state id");
    return {state.true_baseline->begin() + static_cast<std::ptrdiff_t>(s) * state.num_actions,
            state.true_baseline->begin() + static_cast<std::ptrdiff_t>(s + 1) * state.num_actions};
  }
  return state.g_probs(obs);
}

inline std::vector<std::uint64_t> spibb_counts_at(const AgentState& state,
                                                  const std::vector<double>& obs) {
  const int s = state.tabular_state(obs);
  if (s < 0 || state.counts.empty()) {
    throw std::runtime_error("spibb: tabular counts unavailable for observation");
  }
  return {state.counts.begin() + static_cast<std::ptrdiff_t>(s) * state.num_actions,
          state.counts.begin() + static_cast<std::ptrdiff_t>(s + 1) * state.num_actions};
}

// DQN-style update with the max replaced by the SPIBB policy at s'. Default
// is the exact expectation over pi(.|s'); a sampling mode is available.
inline GradResult spibb_minibatch_gradient(const AgentState& state,
                                           const Minibatch& batch, Rng& rng) {
  agent_detail::check_nonempty(batch);
  const AgentConfig& cfg = state.config;
  GradResult res;
  res.grad.assign(state.q.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Transition* t : batch) {
    double target = t->reward;
    if (!t->done) {
      // The policy is built from the same target network that evaluates it, so
      // an empty bootstrapped set degenerates to the plain max-target update.
      const std::vector<double> next_q_target = state.target.forward_raw(t->next_state);
      const std::vector<double> pi =
          spibb_policy(next_q_target, spibb_baseline(state, t->next_state),
                       spibb_counts_at(state, t->next_state),
                       cfg.spibb_count_threshold);
      if (cfg.spibb_sample_next_action) {
        const double u = rng.uniform01();
        double cum = 0.0;
        int a2 = state.num_actions - 1;
        for (int a = 0; a < state.num_actions; ++a) {
          cum += pi[a];
          if (u < cum) { a2 = a; break; }
        }
        target += cfg.discount * next_q_target[a2];
      } else {
        double exp_v = 0.0;
        for (int a = 0; a < state.num_actions; ++a) exp_v += pi[a] * next_q_target[a];
        target += cfg.discount * exp_v;
      }
    }
    DenseNet::ForwardCache cache;
    const std::vector<double> q_s = state.q.forward_raw(t->state, nullptr, &cache);
    const double delta = target - q_s[t->action];
    const LossValue lv = huber_loss(delta, cfg.huber_kappa);
    res.loss += lv.loss * inv_n;
    std::vector<double> upstream(q_s.size(), 0.0);
    upstream[t->action] = -lv.derivative * inv_n;
    agent_detail::accumulate(res, state.q, cache, upstream);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Update entry points
// ---------------------------------------------------------------------------

inline double global_norm(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

inline void clip_by_global_norm(std::vector<double>& v, double max_norm) {
  const double norm = global_norm(v);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (double& x : v) x *= scale;
  }
}

namespace agent_detail {

inline void check_finite(double loss, std::uint64_t iteration) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error("non-finite loss at iteration " +
                             std::to_string(iteration));
  }
}

}  // namespace agent_detail

// One behavioral-cloning step on the generative model.
inline double bc_update(AgentState& state, const Minibatch& batch) {
  BcGradResult g = bc_minibatch_gradient(state, batch);
  agent_detail::check_finite(g.loss, state.iteration);
  adam_step(state.adam_g, state.g.params(), g.g_grad);
  if (!g.trunk_grad.empty()) {
    adam_step(state.adam_trunk, state.q.params(), g.trunk_grad);
  }
  return g.loss;
}

inline double dqn_update(AgentState& state, const Minibatch& batch) {
  GradResult g = dqn_minibatch_gradient(state, batch);
  agent_detail::check_finite(g.loss, state.iteration);
  adam_step(state.adam_q, state.q.params(), g.grad);
  state.iteration += 1;
  return g.loss;
}

inline double qrdqn_update(AgentState& state, const Minibatch& batch) {
  GradResult g = qrdqn_minibatch_gradient(state, batch);
  agent_detail::check_finite(g.loss, state.iteration);
  adam_step(state.adam_q, state.q.params(), g.grad);
  state.iteration += 1;
  return g.loss;
}

inline double rem_update(AgentState& state, const Minibatch& batch, Rng& rng) {
  GradResult g =
      rem_minibatch_gradient(state, batch, sample_simplex(state.config.rem_heads, rng));
  agent_detail::check_finite(g.loss, state.iteration);
  adam_step(state.adam_q, state.q.params(), g.grad);
  state.iteration += 1;
  return g.loss;
}

struct BcqLoss {
  double q_loss;
  double bc_loss;
};

inline BcqLoss bcq_update(AgentState& state, const Minibatch& batch) {
  GradResult g = bcq_minibatch_gradient(state, batch);
  agent_detail::check_finite(g.loss, state.iteration);
  adam_step(state.adam_q, state.q.params(), g.grad);
  const double bc_loss = bc_update(state, batch);
  state.iteration += 1;
  return {g.loss, bc_loss};
}

inline double klcontrol_update(AgentState& state, const Minibatch& batch, Rng& rng) {
  GradResult g = klcontrol_minibatch_gradient(state, batch, rng);
  agent_detail::check_finite(g.loss, state.iteration);
  clip_by_global_norm(g.grad, state.config.grad_clip);
  adam_step(state.adam_q, state.q.params(), g.grad);
  bc_update(state, batch);
  state.iteration += 1;
  return g.loss;
}

inline double spibb_update(AgentState& state, const Minibatch& batch, Rng& rng) {
  GradResult g = spibb_minibatch_gradient(state, batch, rng);
  agent_detail::check_finite(g.loss, state.iteration);
  adam_step(state.adam_q, state.q.params(), g.grad);
  if (!state.true_baseline) bc_update(state, batch);
  state.iteration += 1;
  return g.loss;
}

// Dispatch on the configured algorithm; returns the Q-loss.
inline double agent_update(AgentState& state, const Minibatch& batch, Rng& rng) {
  switch (state.config.algorithm) {
    case Algorithm::Dqn: return dqn_update(state, batch);
    case Algorithm::QrDqn: return qrdqn_update(state, batch);
    case Algorithm::Rem: return rem_update(state, batch, rng);
    case Algorithm::Bcq: return bcq_update(state, batch).q_loss;
    case Algorithm::KlControl: return klcontrol_update(state, batch, rng);
    case Algorithm::Spibb: return spibb_update(state, batch, rng);
  }
  throw std::logic_error("agent_update: bad algorithm tag");
}

// Hard target sync at multiples of target_update_rate; no-op otherwise.
inline void sync_target(AgentState& state) {
  if (state.iteration % static_cast<std::uint64_t>(state.config.target_update_rate) == 0) {
    state.target = state.q;
  }
}

// Algorithm-specific greedy policy with epsilon-uniform exploration.
inline int act(const AgentState& state, const std::vector<double>& obs,
               double epsilon, Rng& rng) {
  if (epsilon > 0.0 && rng.uniform01() < epsilon) {
    return static_cast<int>(rng.uniform_int(state.num_actions));
  }
  switch (state.config.algorithm) {
    case Algorithm::Dqn:
    case Algorithm::KlControl:
      return static_cast<int>(argmax(state.q.forward_raw(obs)));
    case Algorithm::QrDqn:
      return static_cast<int>(
          argmax(action_values(state.q.forward_raw(obs), state.config.quantile_count)));
    case Algorithm::Rem:
      return static_cast<int>(
          argmax(action_values(state.q.forward_raw(obs), state.config.rem_heads)));
    case Algorithm::Bcq:
      return bcq_constrained_argmax(state.q.forward_raw(obs), state.g_probs(obs),
                                    state.config.bcq_threshold);
    case Algorithm::Spibb: {
      const std::vector<double> pi =
          spibb_policy(state.q.forward_raw(obs), spibb_baseline(state, obs),
                       spibb_counts_at(state, obs), state.config.spibb_count_threshold);
      const double u = rng.uniform01();
      double cum = 0.0;
      for (int a = 0; a < state.num_actions; ++a) {
        cum += pi[a];
        if (u < cum) return a;
      }
      return state.num_actions - 1;
    }
  }
  throw std::logic_error("act: bad algorithm tag");
}

// Mean of the agent's own value at batch (s,a) pairs, averaged over sampled
// minibatches; heads and quantiles collapse by their mean.
inline double value_estimate(const AgentState& state, const BatchDataset& data,
                             int num_minibatches, int minibatch_size, Rng& rng) {
  double sum = 0.0;
  std::size_t n = 0;
  const int k = state.config.head_count();
  for (int m = 0; m < num_minibatches; ++m) {
    for (const Transition* t : sample_minibatch(data, minibatch_size, rng)) {
      sum += head_mean(state.q.forward_raw(t->state), t->action, k);
      n += 1;
    }
  }
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Checkpoints: binary parameter snapshots plus a JSON sidecar for the config
// and iteration counter.
// ---------------------------------------------------------------------------

inline nlohmann::json agent_config_to_json(const AgentConfig& c) {
  nlohmann::json j;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["discount"] = c.discount;
  j["target_update_rate"] = c.target_update_rate;
  j["minibatch_size"] = c.minibatch_size;
  j["huber_kappa"] = c.huber_kappa;
  j["eval_epsilon"] = c.eval_epsilon;
  j["learning_rate"] = c.learning_rate;
  j["adam_epsilon"] = c.adam_epsilon;
  j["hidden_sizes"] = c.hidden_sizes;
  j["init_seed"] = c.init_seed;
  j["quantile_count"] = c.quantile_count;
  j["rem_heads"] = c.rem_heads;
  j["bcq_threshold"] = c.bcq_threshold;
  j["dropout_masks"] = c.dropout_masks;
  j["kl_weight"] = c.kl_weight;
  j["grad_clip"] = c.grad_clip;
  j["dropout_probability"] = c.dropout_probability;
  j["spibb_count_threshold"] = c.spibb_count_threshold;
  j["spibb_sample_next_action"] = c.spibb_sample_next_action;
  j["g_penalty"] = c.g_penalty;
  j["share_encoder"] = c.share_encoder;
  return j;
}

inline AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("algorithm")) c.algorithm = parse_algorithm(j.at("algorithm"));
  get("discount", c.discount);
  get("target_update_rate", c.target_update_rate);
  get("minibatch_size", c.minibatch_size);
  get("huber_kappa", c.huber_kappa);
  get("eval_epsilon", c.eval_epsilon);
  get("learning_rate", c.learning_rate);
  get("adam_epsilon", c.adam_epsilon);
  get("hidden_sizes", c.hidden_sizes);
  get("init_seed", c.init_seed);
  get("quantile_count", c.quantile_count);
  get("rem_heads", c.rem_heads);
  get("bcq_threshold", c.bcq_threshold);
  get("dropout_masks", c.dropout_masks);
  get("kl_weight", c.kl_weight);
  get("grad_clip", c.grad_clip);
  get("dropout_probability", c.dropout_probability);
  get("spibb_count_threshold", c.spibb_count_threshold);
  get("spibb_sample_next_action", c.spibb_sample_next_action);
  get("g_penalty", c.g_penalty);
  get("share_encoder", c.share_encoder);
  c.validate();
  return c;
}

inline void save_agent(const AgentState& state, const std::string& prefix) {
  save_net(state.q, prefix + ".q.net");
  if (state.has_g) save_net(state.g, prefix + ".g.net");
  nlohmann::json j;
  j["config"] = agent_config_to_json(state.config);
  j["iteration"] = state.iteration;
  j["num_actions"] = state.num_actions;
  j["obs_dim"] = state.obs_dim;
  std::ofstream out(prefix + ".json");
  if (!out) throw std::runtime_error("save_agent: cannot open " + prefix + ".json");
  out << j.dump(2) << "\n";
}

inline AgentState load_agent(const std::string& prefix) {
  std::ifstream in(prefix + ".json");
  if (!in) throw std::runtime_error("load_agent: cannot open " + prefix + ".json");
  nlohmann::json j;
  in >> j;
  AgentState state = make_agent(agent_config_from_json(j.at("config")),
                                j.at("obs_dim").get<int>(),
                                j.at("num_actions").get<int>());
  state.iteration = j.at("iteration").get<std::uint64_t>();
  state.q = load_net(prefix + ".q.net");
  state.target = state.q;
  if (state.has_g) state.g = load_net(prefix + ".g.net");
  return state;
}

}  // namespace batchrl
