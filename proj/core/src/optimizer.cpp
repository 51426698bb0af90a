#include "emask/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "emask/error.hpp"

namespace emask {

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWOptions options)
    : groups_(std::move(groups)), opt_(options) {
  for (const auto& g : groups_)
    for (const auto* p : g.params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto* p : g.params) p->zero_grad();
}

void AdamW::step(double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  std::size_t slot = 0;
  for (auto& g : groups_) {
    const double lr = g.lr * lr_scale;
    for (auto* p : g.params) {
      auto& m = m_[slot];
      auto& v = v_[slot];
      ++slot;
      if (p->grad.empty()) continue;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double grad = p->grad[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * grad;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * grad * grad;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double& w = p->value[i];
        w -= lr * opt_.weight_decay * w;
        w -= lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }
}

double warmup_linear_decay(std::size_t step, std::size_t total_steps, double warmup_fraction) {
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
    throw ConfigError("warmup_fraction must be in [0, 1)");
  if (total_steps == 0) return 0.0;
  const double total = static_cast<double>(total_steps);
  const double warm = std::floor(warmup_fraction * total);
  const double s = static_cast<double>(step) + 1.0;
  if (s <= warm) return s / warm;
  return std::max(0.0, (total - s + 1.0) / (total - warm));
}

}  // namespace emask
