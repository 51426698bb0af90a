#include "emask/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "emask/error.hpp"

namespace emask::nk {

GradCheckReport finite_diff_check(const std::vector<Parameter*>& params,
                                  const std::function<double()>& loss,
                                  const std::function<void()>& analytic,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("finite_diff_check: step must be positive");

  for (Parameter* p : params) p->zero_grad();
  analytic();

  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.passed = true;
  const double h = options.step;

  for (Parameter* p : params) {
    GradCheckEntry e;
    e.name = p->name;
    const std::size_t n = p->size();
    std::size_t stride = 1;
    if (options.max_coords_per_param > 0 && n > options.max_coords_per_param)
      stride = (n + options.max_coords_per_param - 1) / options.max_coords_per_param;

    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = loss();
      p->value[i] = orig - h;
      const double down = loss();
      p->value[i] = orig;
      ++e.checked;

      const double numeric = (up - down) / (2.0 * h);
      const double a = p->grad.empty() ? 0.0 : p->grad[i];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(a)) {
        ++e.non_finite;
        report.passed = false;
        continue;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = i;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    if (e.max_rel_error > options.tolerance) report.passed = false;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace emask::nk
