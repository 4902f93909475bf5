#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace batchrl {

// Adam optimizer state for one flat parameter vector.
struct AdamState {
  double learning_rate = 0.0000625;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 0.00015;
  std::uint64_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;

  AdamState() = default;
  AdamState(std::size_t param_count, double lr, double eps)
      : learning_rate(lr),
        adam_epsilon(eps),
        first_moment(param_count, 0.0),
        second_moment(param_count, 0.0) {}
};

// One bias-corrected Adam update in place. Throws on a non-finite gradient,
// naming the iteration at which it occurred.
inline void adam_step(AdamState& state, std::vector<double>& params,
                      const std::vector<double>& gradients) {
  if (params.size() != gradients.size() ||
      params.size() != state.first_moment.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = gradients[i];
    if (!std::isfinite(g)) {
      throw std::runtime_error("adam_step: non-finite gradient at optimizer step " +
                               std::to_string(state.step_count));
    }
    state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
    state.second_moment[i] =
        state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.first_moment[i] / bc1;
    const double v_hat = state.second_moment[i] / bc2;
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.adam_epsilon);
  }
}

}  // namespace batchrl
