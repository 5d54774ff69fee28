#pragma once

#include <iosfwd>

#include <Eigen/Dense>

#include "nmrwm/audio_core.hpp"

namespace nmrwm {

/// Critical-band energy grid, bands x frames. Holds pitch, excitation, masking and
/// noise patterns.
using PatternGrid = Eigen::MatrixXd;

/// Ear model tables for one STFT geometry. Immutable after construction.
struct EarModelTables {
  StftConfig stft;
  double sample_rate = kSampleRate;

  Eigen::VectorXd ear_weight;          // per DFT bin, linear amplitude; 0 outside 80 Hz..18 kHz
  Eigen::MatrixXd band_map;            // bands x bins, columns sum to 1 where covered
  Eigen::VectorXd band_lower_bark;
  Eigen::VectorXd band_upper_bark;
  Eigen::VectorXd band_center_bark;
  Eigen::VectorXd band_center_hz;
  Eigen::VectorXd masking_offset;      // linear power factor (< 1)
  Eigen::VectorXd time_spread_coeffs;  // per-frame smoothing coefficient a_c
  Eigen::VectorXd internal_noise;      // power floor added to pitch patterns
  Eigen::VectorXd spread_norm;         // frequency spread of a unit pattern
  double calibration_gain = 1.0;

  Eigen::Index bands() const { return band_map.rows(); }
};

inline constexpr double kLowestBandHz = 80.0;
inline constexpr double kHighestBandHz = 18000.0;
inline constexpr double kBandResolutionBark = 0.25;
/// Listening level of a full-scale bin-centred sinusoid, dB SPL.
inline constexpr double kCalibrationLevelDb = 92.0;

/// Bark scale z(f) = 7 asinh(f / 650).
double hz_to_bark(double hz);
double bark_to_hz(double bark);

/// Outer/middle ear magnitude response in dB at `hz`.
double ear_response_db(double hz);

EarModelTables build_ear_tables(const StftConfig& cfg = {}, double sample_rate = kSampleRate);

struct MaskingOptions {
  bool time_spreading = true;
};

PatternGrid pitch_patterns(const Spectrogram& host, const EarModelTables& tables);

/// Level-dependent two-sided spreading across bands with power-law superposition.
PatternGrid spread_frequency(const PatternGrid& pitch, const EarModelTables& tables);

/// Per-band first-order smoothing along frames, never below the input.
PatternGrid spread_time(const PatternGrid& excitation, const EarModelTables& tables);

PatternGrid masking_patterns(const Spectrogram& host, const EarModelTables& tables,
                             const MaskingOptions& options = {});

/// Ear-weighted band energy of the complex difference host - marked.
PatternGrid noise_patterns(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables);

/// Mean of noise/mask over bands and frames (linear).
double nmr(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables);
/// Same with the host's masking patterns supplied by the caller.
double nmr(const PatternGrid& masking, const Spectrogram& host, const Spectrogram& marked,
           const EarModelTables& tables);

/// 10 log10(max(linear, 1e-12)).
double nmr_db(double linear);

/// Gradient of nmr with respect to the marked spectrogram's real and imaginary planes.
/// The masking patterns are treated as constants.
Spectrogram nmr_gradient(const Spectrogram& host, const Spectrogram& marked, const EarModelTables& tables);
Spectrogram nmr_gradient(const PatternGrid& masking, const Spectrogram& host, const Spectrogram& marked,
                         const EarModelTables& tables);

/// CSV with header frame,band,pitch,mask,noise, one row per (frame, band).
void write_pattern_csv(std::ostream& out, const PatternGrid& pitch, const PatternGrid& mask,
                       const PatternGrid& noise);

}  // namespace nmrwm
