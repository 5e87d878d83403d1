#include "knnmem/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace knnmem {

bool GradCheckReport::all_passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (!e.passed) out.push_back(e.name);
  }
  return out;
}

GradCheckReport grad_check(const LossBuilder& loss_fn, ParameterSet& params, const GradCheckOptions& options) {
  Gradients analytic(params);
  {
    Tape tape(&params);
    tape.backward(loss_fn(tape), analytic);
  }
  auto loss_at = [&] {
    Tape tape(&params);
    return loss_fn(tape).value()[0];
  };

  GradCheckReport report;
  for (ParamId id = 0; id < params.size(); ++id) {
    Parameter& p = params[id];
    if (p.frozen && !options.include_frozen) continue;
    GradCheckEntry entry{p.name};
    const std::size_t n = p.value.size();
    const std::size_t stride =
        (options.max_elements == 0 || n <= options.max_elements) ? 1 : (n + options.max_elements - 1) / options.max_elements;
    for (std::size_t i = 0; i < n; i += stride) {
      const Real original = p.value[i];
      p.value[i] = original + options.step;
      const Real up = loss_at();
      p.value[i] = original - options.step;
      const Real down = loss_at();
      p.value[i] = original;

      const Real numeric = (up - down) / (2.0 * options.step);
      const Real exact = analytic.has(id) ? analytic.get(id)[i] : 0.0;
      const Real abs_err = std::abs(exact - numeric);
      const Real rel_err = abs_err / std::max({std::abs(exact), std::abs(numeric), options.abs_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel_err);
      ++entry.checked;
    }
    entry.passed = entry.max_rel_error < options.tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace knnmem
