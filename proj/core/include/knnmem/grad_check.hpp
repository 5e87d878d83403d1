#pragma once

#include <functional>
#include <string>
#include <vector>

#include "knnmem/autodiff.hpp"

namespace knnmem {

struct GradCheckOptions {
  Real step = 1e-4;
  Real tolerance = 1e-3;
  /// Denominator floor: relative error is |a - n| / max(|a|, |n|, abs_floor).
  Real abs_floor = 1e-6;
  /// Check at most this many elements per tensor (evenly strided); 0 = all.
  std::size_t max_elements = 0;
  bool include_frozen = false;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  Real max_rel_error = 0.0;
  Real max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_passed() const;
  std::vector<std::string> failures() const;
};

/// Builds the scalar loss on a fresh tape bound to the parameter set.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares backward() against central finite differences for every
/// parameter. Parameter values are restored before returning.
GradCheckReport grad_check(const LossBuilder& loss_fn, ParameterSet& params, const GradCheckOptions& options = {});

}  // namespace knnmem
