#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "ctreg/error.hpp"

namespace ctreg {

/// One-cycle learning rate: cosine warm-up from max_lr/div_factor to max_lr
/// over the first pct_start of the steps, then cosine annealing down to
/// initial_lr/final_div_factor at the last step.
struct OneCycleSchedule {
  double max_lr = 1e-2;
  std::size_t total_steps = 1;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;

  double initial_lr() const { return max_lr / div_factor; }
  double final_lr() const { return initial_lr() / final_div_factor; }

  /// Step index at which max_lr is reached.
  std::size_t peak_step() const {
    if (total_steps <= 1) return 0;
    const auto p = static_cast<std::size_t>(std::floor(pct_start * static_cast<double>(total_steps)));
    return std::min(p == 0 ? 0 : p - 1, total_steps - 1);
  }

  double lr(std::size_t step) const {
    if (total_steps <= 1) return max_lr;
    const std::size_t peak = peak_step();
    auto anneal = [](double from, double to, double t) {
      return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    };
    if (step <= peak) {
      if (peak == 0) return max_lr;
      return anneal(initial_lr(), max_lr, static_cast<double>(step) / static_cast<double>(peak));
    }
    const double span = static_cast<double>(total_steps - 1 - peak);
    const double t = std::min(1.0, static_cast<double>(step - peak) / span);
    return anneal(max_lr, final_lr(), t);
  }
};

/// Adam with bias correction. Decay is not applied here: the weight penalty
/// lives in the loss.
template <typename T>
class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::size_t size() const { return m_.size(); }
  std::uint64_t steps() const { return t_; }

  /// Updates `params` in place. The chunks, taken together, must match the
  /// size the optimizer was built for.
  void step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t k = 0;
    for (std::size_t chunk = 0; chunk < params.size(); ++chunk) {
      auto p = params[chunk];
      auto g = grads[chunk];
      if (p.size() != g.size()) throw ContractError("parameter/gradient size mismatch");
      for (std::size_t i = 0; i < p.size(); ++i, ++k) {
        const double gi = g[i];
        m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * gi;
        v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * gi * gi;
        const double mhat = m_[k] / c1, vhat = v_[k] / c2;
        p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
    if (k != m_.size()) throw ContractError("optimizer sized for a different parameter count");
  }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

}  // namespace ctreg
