#pragma once

#include <cstdint>
#include <vector>

#include "knnmem/autodiff.hpp"

namespace knnmem {

struct AdamConfig {
  Real lr = 1e-4;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

/// First and second moment estimates for every parameter in a set.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  AdamState() = default;
  AdamState(const ParameterSet& params, AdamConfig config);
};

/// One bias-corrected Adam update. Frozen parameters and frozen rows are left
/// untouched (their moments are not advanced either); missing gradients count
/// as zero.
void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state);

}  // namespace knnmem
