#pragma once

#include <cmath>

#include "nmrwm/autodiff/params.hpp"

namespace nmrwm::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every trainable parameter from its stored gradient.
template <typename Scalar>
void adam_step(ParamStore<Scalar>& params, const AdamConfig& cfg) {
  for (const auto& p : params)
    if (p.trainable && p.grad.shape() != p.value.shape())
      throw UsageError("gradient shape " + shape_string(p.grad.shape()) + " does not match parameter " + p.name);

  const auto t = static_cast<double>(++params.adam_steps);
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, t));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, t));
  const auto lr = static_cast<Scalar>(cfg.lr);
  const auto eps = static_cast<Scalar>(cfg.eps);
  for (auto& p : params) {
    if (!p.trainable) continue;
    auto& m = p.adam_m.array();
    auto& v = p.adam_v.array();
    const auto& g = p.grad.array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p.value.array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

}  // namespace nmrwm::ad
