#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "nmrwm/autodiff/ops.hpp"
#include "nmrwm/autodiff/tape.hpp"

namespace nmrwm::ad {

/// Compares reverse-mode gradients with central finite differences.
///
/// `build(tape, leaves)` records an op on `tape` from the leaf variables and returns its
/// output. The scalar under test is sum(w * output) for fixed random weights w; it is
/// accumulated in double so the difference quotient is not dominated by the rounding of
/// the sum. The result is the norm-wise relative error over all input coordinates.
template <typename Scalar, typename Build>
double gradient_check(const std::vector<Tensor<Scalar>>& inputs, Build build, std::uint64_t seed, double step) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;

  Tensor<Scalar> weights;
  std::vector<Tensor<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
    const Var<Scalar> out = build(tape, leaves);
    weights = Tensor<Scalar>(out.shape());
    for (Index i = 0; i < weights.size(); ++i) weights[i] = static_cast<Scalar>(gauss(rng));
    tape.backward(dot(out, weights));
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }

  auto objective = [&](const std::vector<Tensor<Scalar>>& xs) {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> leaves;
    for (const auto& t : xs) leaves.push_back(tape.constant(t));
    const Var<Scalar> out = build(tape, leaves);
    return (out.value().array().template cast<double>() * weights.array().template cast<double>()).sum();
  };

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::vector<Tensor<Scalar>> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Index i = 0; i < xs[k].size(); ++i) {
      const Scalar orig = xs[k][i];
      xs[k][i] = static_cast<Scalar>(orig + step);
      const double up = objective(xs);
      const double h_up = static_cast<double>(xs[k][i]) - static_cast<double>(orig);
      xs[k][i] = static_cast<Scalar>(orig - step);
      const double down = objective(xs);
      const double h_down = static_cast<double>(orig) - static_cast<double>(xs[k][i]);
      xs[k][i] = orig;
      const double numeric = (up - down) / (h_up + h_down);
      const double a = static_cast<double>(analytic[k][i]);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
  }
  const double scale = std::sqrt(std::max(a2, n2));
  return scale > 0.0 ? std::sqrt(diff2) / scale : std::sqrt(diff2);
}

/// Tensor with i.i.d. entries uniform in [lo, hi], each negated with probability 1/2
/// when `symmetric`. Keeping |x| >= lo avoids the kinks of piecewise-linear ops.
template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool symmetric = false) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < t.size(); ++i) {
    const double v = u(rng);
    t[i] = static_cast<Scalar>(symmetric && sign(rng) ? -v : v);
  }
  return t;
}

}  // namespace nmrwm::ad
