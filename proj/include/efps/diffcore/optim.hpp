// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "efps/diffcore/tensor.hpp"

namespace efps::diff {

/// lr(step) = min + (base - min) (1 + cos(pi step / total)) / 2
inline double cosine_lr(long long step, long long total, double base_lr, double min_lr) {
  if (total <= 0) throw Error("cosine schedule needs a positive step count");
  if (step < 0 || step > total) throw Error("cosine schedule step out of range");
  const double phase = kPi * static_cast<double>(step) / static_cast<double>(total);
  return min_lr + (base_lr - min_lr) * (1.0 + std::cos(phase)) / 2.0;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over the trainable entries of a parameter list.
///
/// A tensor whose gradient is identically zero is skipped entirely: its
/// moments and values stay as they are, and it does not advance its own step
/// count.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (auto& p : params) {
      if (!p.trainable) continue;
      p.tensor->ensure_grad();
      params_.push_back(p);
      m_.emplace_back(p.tensor->size(), 0.0);
      v_.emplace_back(p.tensor->size(), 0.0);
      steps_.push_back(0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  /// One update with learning rate `lr` (defaults to the configured rate).
  void step(double lr = -1.0) {
    if (lr < 0.0) lr = cfg_.lr;
    ++global_step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& t = *params_[i].tensor;
      if (t.grad.size() != t.data.size())
        throw Error("adam: gradient shape mismatch for " + params_[i].name);
      bool any = false;
      for (const T g : t.grad)
        if (g != T(0)) {
          any = true;
          break;
        }
      if (!any) continue;
      const long long s = ++steps_[i];
      const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s));
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::size_t k = 0; k < t.data.size(); ++k) {
        const double g = t.grad[k];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m[k] / c1;
        const double vh = v[k] / c2;
        t.data[k] = static_cast<T>(t.data[k] - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  long long step_count() const { return global_step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  AdamConfig cfg_;
  ParamList<T> params_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<long long> steps_;
  long long global_step_ = 0;
};

}  // namespace efps::diff
