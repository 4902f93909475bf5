#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <vector>

#include "batchrl/agents.hpp"
#include "batchrl/behavioral.hpp"
#include "batchrl/dataset.hpp"
#include "batchrl/dp.hpp"
#include "batchrl/mdp.hpp"

using namespace batchrl;

namespace {

std::vector<double> one_hot(int id, int dim) {
  std::vector<double> v(dim, 0.0);
  v[id] = 1.0;
  return v;
}

void zero_params(DenseNet& net) {
  std::fill(net.params().begin(), net.params().end(), 0.0);
}

AgentConfig linear_config(Algorithm algo) {
  AgentConfig cfg;
  cfg.algorithm = algo;
  cfg.hidden_sizes = {};
  cfg.init_seed = 5;
  return cfg;
}

Minibatch batch_of(const std::vector<Transition>& ts) {
  Minibatch b;
  for (const Transition& t : ts) b.push_back(&t);
  return b;
}

// batch drawn from a small chain dataset, for cross-algorithm comparisons
BatchDataset chain_batch(std::size_t n = 600) {
  const MdpSpec env = chain_mdp(5);
  const QTable oracle = value_iteration(env, 1e-10);
  BehavioralPolicy policy{net_from_qtable(oracle.values, env.num_states,
                                          env.num_actions)};
  return generate_batch(env, policy, n, 21);
}

}  // namespace

TEST_CASE("algorithm names round trip") {
  for (Algorithm a : {Algorithm::Dqn, Algorithm::QrDqn, Algorithm::Rem,
                      Algorithm::Bcq, Algorithm::KlControl, Algorithm::Spibb}) {
    CHECK(parse_algorithm(algorithm_name(a)) == a);
  }
  CHECK_THROWS_AS(parse_algorithm("sarsa"), std::invalid_argument);
}

TEST_CASE("config validation rejects bad values") {
  AgentConfig cfg;
  cfg.discount = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = AgentConfig{};
  cfg.bcq_threshold = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = AgentConfig{};
  cfg.quantile_count = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("updates reject an empty minibatch") {
  AgentState state = make_agent(linear_config(Algorithm::Dqn), 2, 2);
  Minibatch empty;
  CHECK_THROWS_AS(dqn_minibatch_gradient(state, empty), std::invalid_argument);
}

TEST_CASE("dqn gradient on a terminal transition, by hand") {
  // linear net with zero parameters: Q = 0 everywhere, so for a done
  // transition with reward 1 the residual is 1 and the huber loss is 0.5.
  // The gradient of -delta wrt weight(a0, s0) is -1 (input 1), bias -1.
  AgentState state = make_agent(linear_config(Algorithm::Dqn), 2, 2);
  zero_params(state.q);
  state.target = state.q;
  Transition t{one_hot(0, 2), 0, 1.0, one_hot(1, 2), true};
  const GradResult g = dqn_minibatch_gradient(state, batch_of({t}));
  CHECK(g.loss == Catch::Approx(0.5).margin(1e-12));
  // layout: weights [2x2] row-major by output, then biases [2]
  CHECK(g.grad[0] == Catch::Approx(-1.0).margin(1e-12));  // w(a0, s0)
  CHECK(g.grad[1] == Catch::Approx(0.0).margin(1e-12));   // w(a0, s1)
  CHECK(g.grad[2] == Catch::Approx(0.0).margin(1e-12));   // w(a1, s0)
  CHECK(g.grad[3] == Catch::Approx(0.0).margin(1e-12));
  CHECK(g.grad[4] == Catch::Approx(-1.0).margin(1e-12));  // b(a0)
  CHECK(g.grad[5] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("dqn target bootstraps from the target network max") {
  AgentConfig cfg = linear_config(Algorithm::Dqn);
  cfg.discount = 0.5;
  cfg.huber_kappa = 100.0;  // quadratic regime: loss = 0.5 * delta^2
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.target);
  // target net: Q(s1, .) = (2, 3) via biases on the one-hot input
  state.target.weights(0)[1] = 2.0;  // w(a0, s1)
  state.target.weights(0)[3] = 3.0;  // w(a1, s1)
  Transition t{one_hot(0, 2), 0, 1.0, one_hot(1, 2), false};
  const GradResult g = dqn_minibatch_gradient(state, batch_of({t}));
  // target = 1 + 0.5 * 3 = 2.5, delta = 2.5
  CHECK(g.loss == Catch::Approx(0.5 * 2.5 * 2.5).margin(1e-12));

  // with discount 0 the bootstrap vanishes
  AgentConfig cfg0 = cfg;
  cfg0.discount = 0.0;
  AgentState state0 = make_agent(cfg0, 2, 2);
  zero_params(state0.q);
  state0.target = state.target;
  const GradResult g0 = dqn_minibatch_gradient(state0, batch_of({t}));
  CHECK(g0.loss == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("double dqn evaluates the online argmax with the target network") {
  AgentConfig cfg = linear_config(Algorithm::Dqn);
  cfg.discount = 1.0 - 1e-9;
  cfg.huber_kappa = 100.0;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.target);
  // online prefers a0 at s1, target net values disagree
  state.q.weights(0)[1] = 5.0;       // online Q(s1, a0) = 5
  state.target.weights(0)[1] = 1.0;  // target Q(s1, a0) = 1
  state.target.weights(0)[3] = 9.0;  // target Q(s1, a1) = 9
  Transition t{one_hot(0, 2), 0, 0.0, one_hot(1, 2), false};
  const double vanilla =
      dqn_minibatch_gradient(state, batch_of({t}), false).loss;
  const double doubled =
      dqn_minibatch_gradient(state, batch_of({t}), true).loss;
  // vanilla target ~ 9, double target ~ 1
  CHECK(vanilla > doubled);
  CHECK(doubled == Catch::Approx(0.5 * 1.0).epsilon(1e-6));
}

TEST_CASE("quantile midpoints") {
  const std::vector<double> two = quantile_midpoints(2);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == Catch::Approx(0.25).margin(1e-15));
  CHECK(two[1] == Catch::Approx(0.75).margin(1e-15));
  CHECK(quantile_midpoints(1)[0] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("single-quantile qrdqn is half of dqn") {
  // K=1 uses tau=0.5, and |0.5 - indicator| = 0.5, so loss and gradient are
  // exactly half of the plain dqn values on the same network.
  AgentConfig dqn_cfg = linear_config(Algorithm::Dqn);
  AgentConfig qr_cfg = linear_config(Algorithm::QrDqn);
  qr_cfg.quantile_count = 1;
  AgentState dqn = make_agent(dqn_cfg, 5, 2);
  AgentState qr = make_agent(qr_cfg, 5, 2);
  REQUIRE(dqn.q.param_count() == qr.q.param_count());
  qr.q = dqn.q;
  qr.target = dqn.target;

  const BatchDataset data = chain_batch();
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Minibatch batch = sample_minibatch(data, 32, rng);
    const GradResult gd = dqn_minibatch_gradient(dqn, batch);
    const GradResult gq = qrdqn_minibatch_gradient(qr, batch);
    CHECK(gq.loss == Catch::Approx(0.5 * gd.loss).margin(1e-12));
    for (std::size_t i = 0; i < gd.grad.size(); ++i) {
      CHECK(gq.grad[i] == Catch::Approx(0.5 * gd.grad[i]).margin(1e-12));
    }
  }
}

TEST_CASE("qrdqn loss vanishes at a degenerate fixed point") {
  // all quantiles equal the target exactly: zero network, done transition
  // with zero reward
  AgentConfig cfg = linear_config(Algorithm::QrDqn);
  cfg.quantile_count = 4;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  Transition t{one_hot(0, 2), 0, 0.0, one_hot(1, 2), true};
  const GradResult g = qrdqn_minibatch_gradient(state, batch_of({t}));
  CHECK(g.loss == 0.0);
  for (double x : g.grad) CHECK(x == 0.0);
}

TEST_CASE("single-head rem with alpha=1 equals dqn") {
  AgentConfig dqn_cfg = linear_config(Algorithm::Dqn);
  AgentConfig rem_cfg = linear_config(Algorithm::Rem);
  rem_cfg.rem_heads = 1;
  AgentState dqn = make_agent(dqn_cfg, 5, 2);
  AgentState rem = make_agent(rem_cfg, 5, 2);
  rem.q = dqn.q;
  rem.target = dqn.target;

  const BatchDataset data = chain_batch();
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Minibatch batch = sample_minibatch(data, 32, rng);
    const GradResult gd = dqn_minibatch_gradient(dqn, batch);
    const GradResult gr = rem_minibatch_gradient(rem, batch, {1.0});
    CHECK(gr.loss == Catch::Approx(gd.loss).margin(1e-12));
    for (std::size_t i = 0; i < gd.grad.size(); ++i) {
      CHECK(gr.grad[i] == Catch::Approx(gd.grad[i]).margin(1e-12));
    }
  }
}

TEST_CASE("one-hot alpha touches only its own head") {
  AgentConfig cfg = linear_config(Algorithm::Rem);
  cfg.rem_heads = 3;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  Transition t{one_hot(0, 2), 0, 1.0, one_hot(1, 2), true};
  const GradResult g =
      rem_minibatch_gradient(state, batch_of({t}), {0.0, 1.0, 0.0});
  // outputs are action-major [a * heads + h]; only (a0, h1) gets gradient.
  // weight rows: output o covers indices [o*2, o*2+2)
  for (int o = 0; o < 6; ++o) {
    const double w_s0 = g.grad[static_cast<std::size_t>(o) * 2];
    if (o == 1) {
      CHECK(w_s0 == Catch::Approx(-1.0).margin(1e-12));
    } else {
      CHECK(w_s0 == 0.0);
    }
  }
}

TEST_CASE("rem rejects a wrongly sized alpha") {
  AgentConfig cfg = linear_config(Algorithm::Rem);
  cfg.rem_heads = 3;
  AgentState state = make_agent(cfg, 2, 2);
  Transition t{one_hot(0, 2), 0, 1.0, one_hot(1, 2), true};
  CHECK_THROWS_AS(rem_minibatch_gradient(state, batch_of({t}), {0.5, 0.5}),
                  std::invalid_argument);
}

TEST_CASE("sample_simplex draws valid mixtures with mean 1/K") {
  Rng rng = make_rng(17);
  const int k = 4;
  std::vector<double> mean(k, 0.0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const std::vector<double> a = sample_simplex(k, rng);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      REQUIRE(a[j] >= 0.0);
      sum += a[j];
      mean[j] += a[j] / draws;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
  }
  for (int j = 0; j < k; ++j) {
    CHECK(mean[j] == Catch::Approx(1.0 / k).margin(0.01));
  }
}

TEST_CASE("bcq constrained argmax hand cases") {
  const std::vector<double> q = {5.0, 1.0, 3.0};
  const std::vector<double> g = {0.1, 0.8, 0.16};  // ratios 0.125, 1.0, 0.2

  // threshold 0: plain argmax
  CHECK(bcq_constrained_argmax(q, g, 0.0) == 0);
  // threshold 1: only the g-argmax survives
  CHECK(bcq_constrained_argmax(q, g, 1.0) == 1);
  // threshold 0.3: a0 is pruned even though its Q is inflated; a1 and... only
  // a1 clears 0.3, so a1 wins despite the lowest Q
  CHECK(bcq_constrained_argmax(q, g, 0.3) == 1);
  // threshold 0.15: a1 and a2 admissible, a2 has the better Q
  CHECK(bcq_constrained_argmax(q, g, 0.15) == 2);
  CHECK_THROWS_AS(bcq_constrained_argmax(q, {0.5, 0.5}, 0.3),
                  std::invalid_argument);
}

TEST_CASE("bcq with threshold 0 matches the double dqn gradient") {
  AgentConfig cfg = linear_config(Algorithm::Bcq);
  cfg.bcq_threshold = 0.0;
  AgentState state = make_agent(cfg, 5, 2);
  const BatchDataset data = chain_batch();
  Rng rng = make_rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Minibatch batch = sample_minibatch(data, 32, rng);
    const GradResult gb = bcq_minibatch_gradient(state, batch);
    const GradResult gd = dqn_minibatch_gradient(state, batch, true);
    CHECK(gb.loss == Catch::Approx(gd.loss).margin(1e-12));
    for (std::size_t i = 0; i < gd.grad.size(); ++i) {
      CHECK(gb.grad[i] == Catch::Approx(gd.grad[i]).margin(1e-12));
    }
  }
}

TEST_CASE("bcq never bootstraps from actions the batch rules out") {
  AgentConfig cfg = linear_config(Algorithm::Bcq);
  cfg.bcq_threshold = 0.3;
  cfg.share_encoder = false;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.g);
  // inflate the online Q of action 1 at the next state; make G rule it out
  state.q.weights(0)[3] = 100.0;           // online Q(s1, a1) huge
  state.g.weights(0)[1] = 10.0;            // G logit at s1 favors a0 strongly
  Transition t{one_hot(0, 2), 0, 0.0, one_hot(1, 2), false};
  std::vector<int> picked;
  bcq_minibatch_gradient(state, batch_of({t}), &picked);
  REQUIRE(picked.size() == 1);
  CHECK(picked[0] == 0);

  // the unconstrained learner grabs the inflated action instead
  std::vector<int> unconstrained;
  AgentState loose = state;
  loose.config.bcq_threshold = 0.0;
  bcq_minibatch_gradient(loose, batch_of({t}), &unconstrained);
  CHECK(unconstrained[0] == 1);
}

TEST_CASE("behavioral cloning converges on deterministic data") {
  AgentConfig cfg = linear_config(Algorithm::Bcq);
  cfg.hidden_sizes = {16};
  cfg.learning_rate = 1e-2;
  AgentState state = make_agent(cfg, 3, 2);
  // every visit to s0 takes a1, every visit to s1 takes a0
  std::vector<Transition> ts;
  for (int i = 0; i < 8; ++i) {
    ts.push_back({one_hot(0, 3), 1, 0.0, one_hot(1, 3), false});
    ts.push_back({one_hot(1, 3), 0, 0.0, one_hot(2, 3), true});
  }
  const Minibatch batch = batch_of(ts);
  double first = 0.0;
  double last = 0.0;
  for (int i = 0; i < 800; ++i) {
    const double loss = bc_update(state, batch);
    if (i == 0) first = loss;
    last = loss;
  }
  CHECK(last < first);
  // the logit penalty caps confidence; the 2-action equilibrium sits near 0.966
  CHECK(state.g_probs(one_hot(0, 3))[1] > 0.95);
  CHECK(state.g_probs(one_hot(1, 3))[0] > 0.95);
}

TEST_CASE("cloning with a shared encoder leaves later q layers untouched") {
  AgentConfig cfg = linear_config(Algorithm::Bcq);
  cfg.hidden_sizes = {8, 8};
  cfg.learning_rate = 1e-2;
  REQUIRE(cfg.share_encoder);
  AgentState state = make_agent(cfg, 3, 2);
  const std::vector<double> before = state.q.params();
  std::vector<Transition> ts = {{one_hot(0, 3), 1, 0.0, one_hot(1, 3), true}};
  for (int i = 0; i < 50; ++i) bc_update(state, batch_of(ts));
  const std::vector<double>& after = state.q.params();
  // layer 0 (the trunk) moves, deeper layers are exactly untouched
  const std::size_t trunk = 3 * 8 + 8;
  bool trunk_moved = false;
  for (std::size_t i = 0; i < trunk; ++i) {
    if (before[i] != after[i]) trunk_moved = true;
  }
  CHECK(trunk_moved);
  for (std::size_t i = trunk; i < before.size(); ++i) {
    CHECK(before[i] == after[i]);
  }
}

TEST_CASE("kl-control target on a terminal transition, by hand") {
  // target = log G(a|s) + r/c; with uniform G over 2 actions, r=1, c=2 the
  // target is log(0.5) + 0.5, and with a zero network the residual equals it
  AgentConfig cfg = linear_config(Algorithm::KlControl);
  cfg.dropout_probability = 0.0;
  cfg.share_encoder = false;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.g);
  Transition t{one_hot(0, 2), 0, 1.0, one_hot(1, 2), true};
  Rng rng = make_rng(1);
  const GradResult g = klcontrol_minibatch_gradient(state, batch_of({t}), rng);
  const double target = std::log(0.5) + 0.5;
  CHECK(g.loss == Catch::Approx(0.5 * target * target).margin(1e-12));
}

TEST_CASE("kl-control bootstrap uses the pessimistic logsumexp") {
  // with dropout off, every mask draw is the identity, so the min over masks
  // equals the plain logsumexp of the target outputs
  AgentConfig cfg = linear_config(Algorithm::KlControl);
  cfg.dropout_probability = 0.0;
  cfg.share_encoder = false;
  cfg.discount = 0.5;
  cfg.huber_kappa = 1e9;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.g);
  zero_params(state.target);
  state.target.weights(0)[1] = 1.0;  // Q_target(s1, a0) = 1
  state.target.weights(0)[3] = 2.0;  // Q_target(s1, a1) = 2
  Transition t{one_hot(0, 2), 0, 0.0, one_hot(1, 2), false};
  Rng rng = make_rng(2);
  const GradResult g = klcontrol_minibatch_gradient(state, batch_of({t}), rng);
  const double target =
      std::log(0.5) + 0.5 * std::log(std::exp(1.0) + std::exp(2.0));
  CHECK(g.loss == Catch::Approx(0.5 * target * target).margin(1e-9));
}

TEST_CASE("clip_by_global_norm") {
  std::vector<double> v = {3.0, 4.0};
  CHECK(global_norm(v) == Catch::Approx(5.0).margin(1e-12));
  clip_by_global_norm(v, 1.0);
  CHECK(global_norm(v) == Catch::Approx(1.0).margin(1e-12));
  CHECK(v[0] == Catch::Approx(0.6).margin(1e-12));
  std::vector<double> small = {0.1, 0.1};
  clip_by_global_norm(small, 1.0);
  CHECK(small[0] == 0.1);  // under the cap: untouched
}

TEST_CASE("spibb policy hand cases") {
  const std::vector<double> q = {1.0, 5.0, 3.0};
  const std::vector<double> baseline = {0.1, 0.7, 0.2};

  SECTION("bootstrapped actions keep the baseline mass") {
    // counts (10, 2, 10), threshold 5: a1 is bootstrapped and keeps 0.7;
    // a0 and a2 are free, a2 has the better Q and collects 0.3
    const std::vector<double> pi = spibb_policy(q, baseline, {10, 2, 10}, 5.0);
    CHECK(pi[0] == 0.0);
    CHECK(pi[1] == Catch::Approx(0.7).margin(1e-12));
    CHECK(pi[2] == Catch::Approx(0.3).margin(1e-12));
  }

  SECTION("everything bootstrapped falls back to the baseline") {
    const std::vector<double> pi = spibb_policy(q, baseline, {0, 0, 0}, 5.0);
    CHECK(pi == baseline);
  }

  SECTION("nothing bootstrapped is plain greedy") {
    const std::vector<double> pi = spibb_policy(q, baseline, {9, 9, 9}, 5.0);
    CHECK(pi == std::vector<double>{0.0, 1.0, 0.0});
  }

  SECTION("rejects an unnormalized baseline") {
    CHECK_THROWS_AS(spibb_policy(q, {0.5, 0.5, 0.5}, {1, 1, 1}, 5.0),
                    std::invalid_argument);
  }
}

TEST_CASE("spibb with no bootstrapped actions reduces to dqn") {
  AgentConfig cfg = linear_config(Algorithm::Spibb);
  cfg.spibb_count_threshold = -1.0;  // counts are never <= -1
  AgentState state = make_agent(cfg, 5, 2);
  state.true_baseline = std::vector<double>(10, 0.5);  // uniform over 2 actions
  const BatchDataset data = chain_batch();
  attach_dataset_counts(state, data);
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const Minibatch batch = sample_minibatch(data, 32, rng);
    const GradResult gs = spibb_minibatch_gradient(state, batch, rng);
    const GradResult gd = dqn_minibatch_gradient(state, batch);
    CHECK(gs.loss == Catch::Approx(gd.loss).margin(1e-12));
    for (std::size_t i = 0; i < gd.grad.size(); ++i) {
      CHECK(gs.grad[i] == Catch::Approx(gd.grad[i]).margin(1e-12));
    }
  }
}

TEST_CASE("spibb with everything bootstrapped evaluates the baseline") {
  AgentConfig cfg = linear_config(Algorithm::Spibb);
  cfg.spibb_count_threshold = 1e18;
  cfg.discount = 0.5;
  cfg.huber_kappa = 1e9;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.target);
  state.true_baseline = std::vector<double>{0.25, 0.75, 0.25, 0.75};
  state.counts = {1, 1, 1, 1};
  state.count_states = 2;
  state.target.weights(0)[1] = 4.0;  // Q_target(s1, a0) = 4
  state.target.weights(0)[3] = 8.0;  // Q_target(s1, a1) = 8
  Transition t{one_hot(0, 2), 0, 1.0, one_hot(1, 2), false};
  Rng rng = make_rng(9);
  const GradResult g = spibb_minibatch_gradient(state, batch_of({t}), rng);
  // target = 1 + 0.5 * (0.25 * 4 + 0.75 * 8) = 4.5
  CHECK(g.loss == Catch::Approx(0.5 * 4.5 * 4.5).margin(1e-9));
}

TEST_CASE("act with epsilon 1 is uniform") {
  // chi-squared over 4 actions, 40000 draws; 99.9% critical value for 3
  // degrees of freedom is 16.27
  AgentConfig cfg = linear_config(Algorithm::Dqn);
  AgentState state = make_agent(cfg, 2, 4);
  Rng rng = make_rng(33);
  std::vector<double> hits(4, 0.0);
  const int draws = 40000;
  for (int i = 0; i < draws; ++i) hits[act(state, one_hot(0, 2), 1.0, rng)] += 1.0;
  double chi2 = 0.0;
  for (double h : hits) chi2 += (h - draws / 4.0) * (h - draws / 4.0) / (draws / 4.0);
  CHECK(chi2 < 16.27);
}

TEST_CASE("act with epsilon 0 is the greedy action") {
  AgentConfig cfg = linear_config(Algorithm::Dqn);
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  state.q.weights(0)[2] = 1.0;  // Q(s0, a1) = 1
  Rng rng = make_rng(1);
  for (int i = 0; i < 10; ++i) {
    CHECK(act(state, one_hot(0, 2), 0.0, rng) == 1);
  }
}

TEST_CASE("bcq act respects the constraint") {
  AgentConfig cfg = linear_config(Algorithm::Bcq);
  cfg.bcq_threshold = 1.0;
  cfg.share_encoder = false;
  AgentState state = make_agent(cfg, 2, 2);
  zero_params(state.q);
  zero_params(state.g);
  state.q.weights(0)[2] = 100.0;  // Q(s0, a1) inflated
  state.g.weights(0)[0] = 10.0;   // G strongly prefers a0
  Rng rng = make_rng(2);
  CHECK(act(state, one_hot(0, 2), 0.0, rng) == 0);
}

TEST_CASE("sync_target copies only on schedule") {
  AgentConfig cfg = linear_config(Algorithm::Dqn);
  cfg.target_update_rate = 4;
  AgentState state = make_agent(cfg, 2, 2);
  state.q.params()[0] += 1.0;
  state.iteration = 3;
  sync_target(state);
  CHECK(state.target.params()[0] != state.q.params()[0]);
  state.iteration = 4;
  sync_target(state);
  CHECK(state.target.params() == state.q.params());
}

TEST_CASE("value_estimate averages the chosen-action values") {
  AgentConfig cfg = linear_config(Algorithm::Dqn);
  AgentState state = make_agent(cfg, 5, 2);
  zero_params(state.q);
  state.q.biases(0)[0] = 2.0;
  state.q.biases(0)[1] = 2.0;
  const BatchDataset data = chain_batch(200);
  Rng rng = make_rng(10);
  CHECK(value_estimate(state, data, 16, 32, rng) == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("value_estimate collapses quantiles by their mean") {
  AgentConfig cfg = linear_config(Algorithm::QrDqn);
  cfg.quantile_count = 2;
  AgentState state = make_agent(cfg, 5, 2);
  zero_params(state.q);
  // action-major output [a*k + h]: both actions get quantiles (1, 3)
  for (int a = 0; a < 2; ++a) {
    state.q.biases(0)[a * 2 + 0] = 1.0;
    state.q.biases(0)[a * 2 + 1] = 3.0;
  }
  const BatchDataset data = chain_batch(200);
  Rng rng = make_rng(11);
  CHECK(value_estimate(state, data, 16, 32, rng) == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("agent training is deterministic given seeds") {
  const BatchDataset data = chain_batch();
  auto run = [&](Algorithm algo) {
    AgentConfig cfg;
    cfg.algorithm = algo;
    cfg.hidden_sizes = {8};
    cfg.init_seed = 77;
    AgentState state = make_agent(cfg, 5, 2);
    if (algo == Algorithm::Spibb) attach_dataset_counts(state, data);
    Rng rng = make_rng(123);
    for (int i = 0; i < 50; ++i) {
      sync_target(state);
      agent_update(state, sample_minibatch(data, 32, rng), rng);
    }
    return state.q.params();
  };
  for (Algorithm algo : {Algorithm::Dqn, Algorithm::QrDqn, Algorithm::Rem,
                         Algorithm::Bcq, Algorithm::KlControl, Algorithm::Spibb}) {
    CHECK(run(algo) == run(algo));
  }
}

TEST_CASE("checkpoint round trip preserves the agent") {
  AgentConfig cfg;
  cfg.algorithm = Algorithm::Bcq;
  cfg.hidden_sizes = {8};
  cfg.init_seed = 9;
  AgentState state = make_agent(cfg, 5, 2);
  const BatchDataset data = chain_batch(200);
  Rng rng = make_rng(14);
  for (int i = 0; i < 10; ++i) {
    sync_target(state);
    agent_update(state, sample_minibatch(data, 32, rng), rng);
  }
  const std::string prefix =
      (std::filesystem::temp_directory_path() / "batchrl_agent").string();
  save_agent(state, prefix);
  const AgentState loaded = load_agent(prefix);
  CHECK(loaded.q.params() == state.q.params());
  CHECK(loaded.g.params() == state.g.params());
  CHECK(loaded.iteration == state.iteration);
  CHECK(loaded.config.algorithm == Algorithm::Bcq);
  CHECK(loaded.config.bcq_threshold == state.config.bcq_threshold);
  CHECK(loaded.num_actions == 2);
  std::remove((prefix + ".json").c_str());
  std::remove((prefix + ".q.net").c_str());
  std::remove((prefix + ".g.net").c_str());
}

TEST_CASE("attach_dataset_counts requires tabular counts") {
  AgentState state = make_agent(linear_config(Algorithm::Spibb), 2, 2);
  BatchDataset data;
  data.num_actions = 2;
  CHECK_THROWS_AS(attach_dataset_counts(state, data), std::runtime_error);
}
