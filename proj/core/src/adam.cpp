#include "knnmem/adam.hpp"

#include <cmath>

#include "knnmem/error.hpp"

namespace knnmem {

AdamState::AdamState(const ParameterSet& params, AdamConfig cfg) : config(cfg) {
  first_moment.reserve(params.size());
  second_moment.reserve(params.size());
  for (const auto& p : params) {
    first_moment.emplace_back(p.value.shape());
    second_moment.emplace_back(p.value.shape());
  }
}

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  for (ParamId id = 0; id < params.size(); ++id) {
    const Parameter& p = params[id];
    if (state.first_moment[id].shape() != p.value.shape() || state.second_moment[id].shape() != p.value.shape()) {
      throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    }
    if (grads.has(id) && grads.get(id).shape() != p.value.shape()) {
      throw ShapeError("adam_step: gradient shape " + to_string(grads.get(id).shape()) + " does not match " + p.name +
                       " " + to_string(p.value.shape()));
    }
  }

  ++state.step;
  const AdamConfig& c = state.config;
  const Real t = static_cast<Real>(state.step);
  const Real correction1 = 1.0 - std::pow(c.beta1, t);
  const Real correction2 = 1.0 - std::pow(c.beta2, t);

  for (ParamId id = 0; id < params.size(); ++id) {
    Parameter& p = params[id];
    if (p.frozen) continue;
    Tensor& m = state.first_moment[id];
    Tensor& v = state.second_moment[id];
    const bool has_grad = grads.has(id);
    const std::size_t cols = p.value.cols();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (!p.frozen_rows.empty() && p.frozen_rows[i / cols]) continue;
      const Real g = has_grad ? grads.get(id)[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const Real m_hat = m[i] / correction1;
      const Real v_hat = v[i] / correction2;
      p.value[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace knnmem
