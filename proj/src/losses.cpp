#include "nmrwm/losses.hpp"

#include <algorithm>
#include <cmath>

#include "nmrwm/error.hpp"

namespace nmrwm {
namespace {

void check_lengths(const SoftMessage& predicted, const BitMessage& target) {
  if (static_cast<std::size_t>(predicted.size()) != target.size())
    throw UsageError("bce: message length mismatch");
  if (target.size() == 0) throw UsageError("bce: empty message");
}

}  // namespace

LossWeights::LossWeights(double a) : alpha(a) {
  if (!(a >= 0.0 && a <= 1.0)) throw UsageError("alpha must lie in [0, 1]");
}

double bce(const SoftMessage& predicted, const BitMessage& target) {
  check_lengths(predicted, target);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < predicted.size(); ++i) {
    const double p = std::clamp(predicted(i), kBceEpsilon, 1.0 - kBceEpsilon);
    acc += target[static_cast<std::size_t>(i)] ? std::log(p) : std::log1p(-p);
  }
  return -acc / static_cast<double>(predicted.size());
}

Eigen::VectorXd bce_gradient(const SoftMessage& predicted, const BitMessage& target) {
  check_lengths(predicted, target);
  const double n = static_cast<double>(predicted.size());
  Eigen::VectorXd g(predicted.size());
  for (Eigen::Index i = 0; i < predicted.size(); ++i) {
    const double p = std::clamp(predicted(i), kBceEpsilon, 1.0 - kBceEpsilon);
    const double m = target[static_cast<std::size_t>(i)];
    g(i) = (p - m) / (p * (1.0 - p) * n);
  }
  return g;
}

double mse_spec(const Spectrogram& host, const Spectrogram& marked) {
  if (!host.same_shape(marked)) throw UsageError("mse_spec: shape mismatch");
  const double count = 2.0 * static_cast<double>(host.re.size());
  return ((host.re - marked.re).squaredNorm() + (host.im - marked.im).squaredNorm()) / count;
}

Spectrogram mse_spec_gradient(const Spectrogram& host, const Spectrogram& marked) {
  if (!host.same_shape(marked)) throw UsageError("mse_spec: shape mismatch");
  const double scale = 2.0 / (2.0 * static_cast<double>(host.re.size()));
  return {scale * (marked.re - host.re), scale * (marked.im - host.im)};
}

LossResult combined_loss(const Spectrogram& host, const Spectrogram& marked, const SoftMessage& predicted,
                         const BitMessage& target, LossWeights weights, DistortionMode mode,
                         const EarModelTables& tables, const PatternGrid* masking) {
  const double a = weights.alpha;
  LossResult r;
  r.message = bce(predicted, target);
  r.predicted_grad = (1.0 - a) * bce_gradient(predicted, target);
  if (mode == DistortionMode::nmr) {
    const PatternGrid local = masking ? PatternGrid() : masking_patterns(host, tables);
    const PatternGrid& m = masking ? *masking : local;
    r.distortion = nmr(m, host, marked, tables);
    r.marked_grad = nmr_gradient(m, host, marked, tables);
  } else {
    r.distortion = mse_spec(host, marked);
    r.marked_grad = mse_spec_gradient(host, marked);
  }
  r.marked_grad.re *= a;
  r.marked_grad.im *= a;
  r.value = a * r.distortion + (1.0 - a) * r.message;
  return r;
}

}  // namespace nmrwm
