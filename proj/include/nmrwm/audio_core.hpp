#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace nmrwm {

inline constexpr int kSampleRate = 44100;
/// 48640 samples = 95 hops of 512; a centered STFT of this length has 96 frames.
inline constexpr Eigen::Index kSegmentLength = 48640;

/// STFT geometry. Hop must be half the DFT length (periodic Hann, 50% overlap).
struct StftConfig {
  Eigen::Index dft_length = 1024;
  Eigen::Index hop = 512;
  bool centered = true;
  Eigen::Index segment_length = kSegmentLength;

  Eigen::Index bins() const { return dft_length / 2 + 1; }
  Eigen::Index pad() const { return centered ? dft_length / 2 : 0; }
  Eigen::Index padded_length() const { return segment_length + 2 * pad(); }
  Eigen::Index frames() const { return (padded_length() - dft_length) / hop + 1; }

  /// Throws UsageError if the geometry is unsupported.
  void validate() const;

  friend bool operator==(const StftConfig&, const StftConfig&) = default;
};

/// One embedding unit of audio.
struct Segment {
  Eigen::VectorXd samples;

  Segment() = default;
  explicit Segment(Eigen::VectorXd s) : samples(std::move(s)) {}
  Eigen::Index size() const { return samples.size(); }
  /// True when any sample lies outside [-1, 1].
  bool out_of_range() const;
};

/// Complex STFT held as separate real and imaginary planes, bins x frames.
struct Spectrogram {
  Eigen::MatrixXd re;
  Eigen::MatrixXd im;

  Spectrogram() = default;
  Spectrogram(Eigen::Index bins, Eigen::Index frames)
      : re(Eigen::MatrixXd::Zero(bins, frames)), im(Eigen::MatrixXd::Zero(bins, frames)) {}
  Spectrogram(Eigen::MatrixXd r, Eigen::MatrixXd i) : re(std::move(r)), im(std::move(i)) {}

  Eigen::Index bins() const { return re.rows(); }
  Eigen::Index frames() const { return re.cols(); }
  bool same_shape(const Spectrogram& o) const {
    return re.rows() == o.re.rows() && re.cols() == o.re.cols();
  }
};

/// Periodic Hann window of the configured DFT length.
Eigen::VectorXd hann_window(Eigen::Index length);

enum class PadPolicy { zero_pad_last, drop_last };

/// Split into consecutive non-overlapping blocks of `length` samples.
std::vector<Segment> segment_signal(const Eigen::VectorXd& signal, PadPolicy policy,
                                    Eigen::Index length = kSegmentLength);

/// Centered STFT with reflect padding.
Spectrogram stft(const Eigen::Ref<const Eigen::VectorXd>& segment, const StftConfig& cfg = {});
inline Spectrogram stft(const Segment& segment, const StftConfig& cfg = {}) {
  return stft(segment.samples, cfg);
}

/// Least-squares inverse: windowed overlap-add normalized by the summed squared window.
Eigen::VectorXd istft(const Spectrogram& spec, const StftConfig& cfg = {});

/// Adjoint of stft as a real-linear map (re/im planes to samples).
Eigen::VectorXd stft_adjoint(const Spectrogram& grad, const StftConfig& cfg = {});

/// Adjoint of istft as a real-linear map (samples to re/im planes).
Spectrogram istft_adjoint(const Eigen::Ref<const Eigen::VectorXd>& grad, const StftConfig& cfg = {});

/// 10 log10(sum host^2 / sum (host - marked)^2). Returns +inf when marked == host.
double snr_db(const Eigen::Ref<const Eigen::VectorXd>& host,
              const Eigen::Ref<const Eigen::VectorXd>& marked);

}  // namespace nmrwm
