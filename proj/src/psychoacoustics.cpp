#include "nmrwm/psychoacoustics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "nmrwm/error.hpp"

namespace nmrwm {
namespace {

using Index = Eigen::Index;

constexpr double kLowerSlopeDbPerBark = 27.0;
constexpr double kSpreadExponent = 0.4;
constexpr double kTauMin = 0.008;
constexpr double kTau100 = 0.030;

void check_host(const Spectrogram& s, const EarModelTables& tables) {
  if (s.bins() != tables.stft.bins() || s.frames() != tables.stft.frames() || s.im.rows() != s.re.rows() ||
      s.im.cols() != s.re.cols())
    throw UsageError("spectrogram shape does not match the ear model geometry");
}

void check_pair(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables) {
  check_host(host, tables);
  if (!host.same_shape(marked)) throw UsageError("host and marked spectrograms differ in shape");
}

// Per-bin power weight (g_L * w_f)^2.
Eigen::ArrayXd bin_power_weight(const EarModelTables& tables) {
  return (tables.calibration_gain * tables.ear_weight.array()).square();
}

// (sum_k contribution_k^0.4)^(1/0.4) for one frame, without normalization.
Eigen::VectorXd spread_unnormalized(const Eigen::VectorXd& energy, const EarModelTables& tables) {
  const Index bands = energy.size();
  const double down = std::pow(10.0, -kLowerSlopeDbPerBark * kBandResolutionBark / 10.0);
  const double down_p = std::pow(down, kSpreadExponent);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(bands);
  for (Index k = 0; k < bands; ++k) {
    const double e = energy(k);
    if (e <= 0.0) continue;
    const double level = 10.0 * std::log10(e);
    // Upper slope flattens with level; clamped so the spread never grows with distance.
    const double slope = std::max(0.0, 24.0 + 230.0 / tables.band_center_hz(k) - 0.2 * level);
    const double up = std::pow(10.0, -slope * kBandResolutionBark / 10.0);

    // Each spreading function carries unit total energy.
    double area = 0.0, f = 1.0;
    for (Index l = k - 1; l >= 0; --l) area += (f *= down);
    f = 1.0;
    for (Index l = k; l < bands; ++l) {
      area += f;
      f *= up;
    }

    const double base = std::pow(e / area, kSpreadExponent);
    const double up_p = std::pow(up, kSpreadExponent);
    acc(k) += base;
    double c = base;
    for (Index l = k - 1; l >= 0; --l) acc(l) += (c *= down_p);
    c = base;
    for (Index l = k + 1; l < bands; ++l) acc(l) += (c *= up_p);
  }
  return acc.array().pow(1.0 / kSpreadExponent).matrix();
}

}  // namespace

double hz_to_bark(double hz) { return 7.0 * std::asinh(hz / 650.0); }
double bark_to_hz(double bark) { return 650.0 * std::sinh(bark / 7.0); }

double ear_response_db(double hz) {
  const double khz = hz / 1000.0;
  return -0.6 * 3.64 * std::pow(khz, -0.8) + 6.5 * std::exp(-0.6 * (khz - 3.3) * (khz - 3.3)) -
         1e-3 * std::pow(khz, 3.6);
}

EarModelTables build_ear_tables(const StftConfig& cfg, double sample_rate) {
  cfg.validate();
  EarModelTables t;
  t.stft = cfg;
  t.sample_rate = sample_rate;

  const Index bins = cfg.bins();
  const double bin_hz = sample_rate / static_cast<double>(cfg.dft_length);
  const double z_low = hz_to_bark(kLowestBandHz);
  const double z_high = hz_to_bark(kHighestBandHz);
  const auto bands = static_cast<Index>(std::ceil((z_high - z_low) / kBandResolutionBark - 1e-9));

  t.band_lower_bark.resize(bands);
  t.band_upper_bark.resize(bands);
  t.band_center_bark.resize(bands);
  t.band_center_hz.resize(bands);
  for (Index c = 0; c < bands; ++c) {
    t.band_lower_bark(c) = z_low + static_cast<double>(c) * kBandResolutionBark;
    t.band_upper_bark(c) = std::min(t.band_lower_bark(c) + kBandResolutionBark, z_high);
    t.band_center_bark(c) = 0.5 * (t.band_lower_bark(c) + t.band_upper_bark(c));
    t.band_center_hz(c) = bark_to_hz(t.band_center_bark(c));
  }

  // Band map from the overlap of each bin's frequency interval with each band.
  t.band_map = Eigen::MatrixXd::Zero(bands, bins);
  for (Index c = 0; c < bands; ++c) {
    const double lo = bark_to_hz(t.band_lower_bark(c));
    const double hi = bark_to_hz(t.band_upper_bark(c));
    for (Index k = 0; k < bins; ++k) {
      const double b_lo = std::max(0.0, (static_cast<double>(k) - 0.5) * bin_hz);
      const double b_hi = (static_cast<double>(k) + 0.5) * bin_hz;
      const double overlap = std::min(hi, b_hi) - std::max(lo, b_lo);
      if (overlap > 0.0) t.band_map(c, k) = overlap / bin_hz;
    }
  }
  for (Index k = 0; k < bins; ++k) {
    const double s = t.band_map.col(k).sum();
    if (s > 0.0) t.band_map.col(k) /= s;
  }

  t.ear_weight = Eigen::VectorXd::Zero(bins);
  for (Index k = 0; k < bins; ++k) {
    const double hz = static_cast<double>(k) * bin_hz;
    if (hz >= kLowestBandHz && hz <= kHighestBandHz) t.ear_weight(k) = std::pow(10.0, ear_response_db(hz) / 20.0);
  }

  // Peak bin of an amplitude-1 bin-centred cosine is sum(window)/2.
  const double peak = hann_window(cfg.dft_length).sum() / 2.0;
  t.calibration_gain = std::pow(10.0, kCalibrationLevelDb / 20.0) / peak;

  const double hop_seconds = static_cast<double>(cfg.hop) / sample_rate;
  t.masking_offset.resize(bands);
  t.time_spread_coeffs.resize(bands);
  t.internal_noise.resize(bands);
  for (Index c = 0; c < bands; ++c) {
    const double z = t.band_center_bark(c);
    const double hz = t.band_center_hz(c);
    const double offset_db = z <= 12.0 ? 3.0 : 0.25 * z;
    t.masking_offset(c) = std::pow(10.0, -offset_db / 10.0);
    const double tau = kTauMin + (100.0 / hz) * (kTau100 - kTauMin);
    t.time_spread_coeffs(c) = std::exp(-hop_seconds / tau);
    t.internal_noise(c) = std::pow(10.0, 0.4 * 3.64 * std::pow(hz / 1000.0, -0.8) / 10.0);
  }
  t.spread_norm = spread_unnormalized(Eigen::VectorXd::Ones(bands), t);
  return t;
}

PatternGrid pitch_patterns(const Spectrogram& host, const EarModelTables& tables) {
  check_host(host, tables);
  const Eigen::MatrixXd power =
      (host.re.array().square() + host.im.array().square()).colwise() * bin_power_weight(tables);
  return tables.band_map * power;
}

PatternGrid spread_frequency(const PatternGrid& pitch, const EarModelTables& tables) {
  if (pitch.rows() != tables.bands()) throw UsageError("pattern band count mismatch");
  PatternGrid out(pitch.rows(), pitch.cols());
  for (Index t = 0; t < pitch.cols(); ++t)
    out.col(t) = spread_unnormalized(pitch.col(t), tables).cwiseQuotient(tables.spread_norm);
  return out;
}

PatternGrid spread_time(const PatternGrid& excitation, const EarModelTables& tables) {
  if (excitation.rows() != tables.bands()) throw UsageError("pattern band count mismatch");
  PatternGrid out(excitation.rows(), excitation.cols());
  for (Index c = 0; c < excitation.rows(); ++c) {
    const double a = tables.time_spread_coeffs(c);
    double state = 0.0;
    for (Index t = 0; t < excitation.cols(); ++t) {
      const double e = excitation(c, t);
      state = std::max(e, a * state + (1.0 - a) * e);
      out(c, t) = state;
    }
  }
  return out;
}

PatternGrid masking_patterns(const Spectrogram& host, const EarModelTables& tables, const MaskingOptions& options) {
  const PatternGrid pitch = pitch_patterns(host, tables).colwise() + tables.internal_noise;
  PatternGrid excitation = spread_frequency(pitch, tables);
  if (options.time_spreading) excitation = spread_time(excitation, tables);
  return tables.masking_offset.asDiagonal() * excitation;
}

PatternGrid noise_patterns(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables) {
  check_pair(host, marked, tables);
  const Eigen::MatrixXd power =
      ((host.re - marked.re).array().square() + (host.im - marked.im).array().square()).colwise() *
      bin_power_weight(tables);
  return tables.band_map * power;
}

double nmr(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables) {
  return nmr(masking_patterns(host, tables), host, marked, tables);
}

double nmr(const PatternGrid& masking, const Spectrogram& host, const Spectrogram& marked,
           const EarModelTables& tables) {
  const PatternGrid noise = noise_patterns(host, marked, tables);
  if (masking.rows() != noise.rows() || masking.cols() != noise.cols())
    throw UsageError("masking pattern shape mismatch");
  return (noise.array() / masking.array()).mean();
}

double nmr_db(double linear) { return 10.0 * std::log10(std::max(linear, 1e-12)); }

Spectrogram nmr_gradient(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables) {
  return nmr_gradient(masking_patterns(host, tables), host, marked, tables);
}

Spectrogram nmr_gradient(const PatternGrid& masking, const Spectrogram& host, const Spectrogram& marked,
                         const EarModelTables& tables) {
  check_pair(host, marked, tables);
  if (masking.rows() != tables.bands() || masking.cols() != host.frames())
    throw UsageError("masking pattern shape mismatch");
  const double cells = static_cast<double>(masking.rows() * masking.cols());
  const Eigen::ArrayXd per_bin = (2.0 / cells) * bin_power_weight(tables);
  // Sum_c U_{c,f} / M_{c,t}, scaled per bin.
  const Eigen::ArrayXXd weight =
      (tables.band_map.transpose() * masking.cwiseInverse()).array().colwise() * per_bin;
  return {(weight * (marked.re - host.re).array()).matrix(), (weight * (marked.im - host.im).array()).matrix()};
}

void write_pattern_csv(std::ostream& out, const PatternGrid& pitch, const PatternGrid& mask, const PatternGrid& noise) {
  if (pitch.rows() != mask.rows() || pitch.rows() != noise.rows() || pitch.cols() != mask.cols() ||
      pitch.cols() != noise.cols())
    throw UsageError("pattern grids differ in shape");
  out << "frame,band,pitch,mask,noise\n";
  out.precision(17);
  for (Index t = 0; t < pitch.cols(); ++t)
    for (Index c = 0; c < pitch.rows(); ++c)
      out << t << ',' << c << ',' << pitch(c, t) << ',' << mask(c, t) << ',' << noise(c, t) << '\n';
}

}  // namespace nmrwm
