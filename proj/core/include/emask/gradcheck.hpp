#pragma once

#include <functional>
#include <string>
#include <vector>

#include "emask/graph.hpp"

namespace emask::nk {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t non_finite = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  /// Check at most this many coordinates per parameter (evenly strided); 0 = all.
  std::size_t max_coords_per_param = 0;
};

/// Compares analytic gradients against central differences.
///
/// `loss` evaluates the scalar objective at the current parameter values.
/// `analytic` must leave d(loss)/d(param) in each Parameter::grad.
GradCheckReport finite_diff_check(const std::vector<Parameter*>& params,
                                  const std::function<double()>& loss,
                                  const std::function<void()>& analytic,
                                  const GradCheckOptions& options = {});

}  // namespace emask::nk
