#pragma once

#include "nmrwm/audio_core.hpp"
#include "nmrwm/message.hpp"
#include "nmrwm/psychoacoustics.hpp"

namespace nmrwm {

enum class DistortionMode { nmr, mse };

/// Transparency weight: 0 optimizes extraction only, 1 transparency only.
struct LossWeights {
  double alpha = 0.5;

  explicit LossWeights(double a);
};

inline constexpr double kBceEpsilon = 1e-7;

/// Mean binary cross entropy with predictions clipped to [eps, 1 - eps].
double bce(const SoftMessage& predicted, const BitMessage& target);
/// d bce / d predicted. Inside the clip range this is the exact derivative; outside it,
/// the clipped probability is used so saturated predictions still receive a signal.
Eigen::VectorXd bce_gradient(const SoftMessage& predicted, const BitMessage& target);

/// Mean squared difference over all real and imaginary entries.
double mse_spec(const Spectrogram& host, const Spectrogram& marked);
Spectrogram mse_spec_gradient(const Spectrogram& host, const Spectrogram& marked);

struct LossResult {
  double value = 0.0;
  double distortion = 0.0;
  double message = 0.0;
  Spectrogram marked_grad;
  Eigen::VectorXd predicted_grad;
};

/// alpha * distortion(marked, host) + (1 - alpha) * bce(predicted, target).
/// `masking` may carry precomputed host masking patterns for the nmr mode.
LossResult combined_loss(const Spectrogram& host, const Spectrogram& marked, const SoftMessage& predicted,
                         const BitMessage& target, LossWeights weights, DistortionMode mode,
                         const EarModelTables& tables, const PatternGrid* masking = nullptr);

}  // namespace nmrwm
