#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace batchrl {

struct LossValue {
  double loss;
  double derivative;  // d loss / d delta
};

// Huber loss l_kappa(delta): quadratic inside |delta| <= kappa, linear outside.
// Continuous with continuous first derivative at the knee.
inline LossValue huber_loss(double delta, double kappa) {
  if (kappa <= 0.0) throw std::invalid_argument("huber_loss: kappa must be > 0");
  const double abs_delta = std::abs(delta);
  if (abs_delta <= kappa) {
    return {0.5 * delta * delta, delta};
  }
  const double sign = delta < 0.0 ? -1.0 : 1.0;
  return {kappa * (abs_delta - 0.5 * kappa), kappa * sign};
}

// Quantile Huber loss: |tau - 1{delta < 0}| * l_kappa(delta).
inline LossValue quantile_huber_loss(double delta, double quantile_level,
                                     double kappa) {
  if (quantile_level <= 0.0 || quantile_level >= 1.0) {
    throw std::invalid_argument(
        "quantile_huber_loss: quantile_level must be in (0,1)");
  }
  const double weight =
      std::abs(quantile_level - (delta < 0.0 ? 1.0 : 0.0));
  const LossValue base = huber_loss(delta, kappa);
  return {weight * base.loss, weight * base.derivative};
}

// Max-shifted log sum exp over a non-empty vector.
inline double logsumexp(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("logsumexp: empty input");
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - m);
  return m + std::log(sum);
}

// Numerically stable softmax.
inline std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

struct CrossEntropyResult {
  double loss;
  std::vector<double> grad_logits;  // softmax(logits) - one_hot(target)
};

// -log softmax(logits)[target], computed via log-sum-exp.
inline CrossEntropyResult cross_entropy_loss(const std::vector<double>& logits,
                                             std::size_t target_action) {
  if (target_action >= logits.size()) {
    throw std::invalid_argument("cross_entropy_loss: target out of range");
  }
  const double lse = logsumexp(logits);
  CrossEntropyResult res;
  res.loss = lse - logits[target_action];
  res.grad_logits = softmax(logits);
  res.grad_logits[target_action] -= 1.0;
  return res;
}

inline std::size_t argmax(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;  // ties keep the lowest index
  }
  return best;
}

}  // namespace batchrl
