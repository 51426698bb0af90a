#pragma once

#include <cstddef>
#include <vector>

#include "emask/graph.hpp"

namespace emask {

/// One optimizer group: parameters sharing a peak learning rate.
struct ParamGroup {
  std::vector<nk::Parameter*> params;
  double lr = 1e-3;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-2;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, AdamWOptions options = {});

  /// Applies one update with every group's lr multiplied by `lr_scale`.
  void step(double lr_scale);
  void zero_grad();
  std::size_t steps_taken() const noexcept { return t_; }
  const std::vector<ParamGroup>& groups() const noexcept { return groups_; }

 private:
  std::vector<ParamGroup> groups_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Linear warmup over the first `warmup_fraction` of steps, then linear decay
/// to zero at `total_steps`. Returns the multiplier for step index `step`.
double warmup_linear_decay(std::size_t step, std::size_t total_steps, double warmup_fraction);

}  // namespace emask
