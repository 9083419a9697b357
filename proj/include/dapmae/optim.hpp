// SPDX-License-Identifier: Apache-2.0
//
// Decoupled-weight-decay Adam and the warm-up + cosine learning-rate
// schedule.

#pragma once

#include <cmath>
#include <cstdint>

#include "dapmae/params.hpp"

namespace dapmae {

struct OptimConfig {
  double lr = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("optimizer: lr/weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("optimizer: betas must lie in [0, 1)");
  }
};

/// AdamW. Weight decay applies to 2-D weight matrices only; biases,
/// norm parameters and learnable tokens (vectors) are not decayed.
/// Parameters that have never received a nonzero gradient are left
/// bit-identical.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

  void step(ParamStore<T>& ps, double lr) {
    ++t_;
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T bc1 = T(1) - std::pow(b1, T(t_));
    const T bc2 = T(1) - std::pow(b2, T(t_));
    for (auto& p : ps.all()) {
      if (!p.trainable || !p.has_grad) continue;
      if (p.grad.isZero(T(0)) && p.adam_m.isZero(T(0)) && p.adam_v.isZero(T(0)))
        continue;  // untouched parameter: no decay drift
      p.adam_m = b1 * p.adam_m + (T(1) - b1) * p.grad;
      p.adam_v = (b2 * p.adam_v.array() + (T(1) - b2) * p.grad.array().square()).matrix();
      const bool decay = p.value.rows() > 1 && p.value.cols() > 1;
      if (decay && cfg_.weight_decay > 0.0)
        p.value -= T(lr * cfg_.weight_decay) * p.value;
      p.value -= (T(lr) * (p.adam_m / bc1).array() /
                  ((p.adam_v / bc2).array().sqrt() + T(cfg_.eps)))
                     .matrix();
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  OptimConfig cfg_;
  std::int64_t t_ = 0;
};

/// Learning rate at fractional epoch t: linear warm-up from zero to the
/// peak over `warmup` epochs, then cosine decay to zero at `total`.
inline double lr_at(double peak, double warmup, double total, double t) {
  if (t < 0.0) t = 0.0;
  if (warmup > 0.0 && t < warmup) return peak * (t / warmup);
  if (total <= warmup) return peak;
  double progress = (t - warmup) / (total - warmup);
  if (progress > 1.0) progress = 1.0;
  return peak * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

}  // namespace dapmae
