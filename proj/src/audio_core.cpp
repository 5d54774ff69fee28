#include "nmrwm/audio_core.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <string>

#include <unsupported/Eigen/FFT>

#include "nmrwm/error.hpp"

namespace nmrwm {
namespace {

using Index = Eigen::Index;

// Real FFT helper bound to one DFT length. Not shared between threads.
class RealFft {
 public:
  explicit RealFft(Index n) : n_(n) { fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum); }

  void forward(const Eigen::VectorXd& frame, Eigen::VectorXcd& out) { fft_.fwd(out, frame); }

  // Scaled by 1/n. Imaginary parts of DC and Nyquist are ignored.
  void inverse(Eigen::VectorXcd spectrum, Eigen::VectorXd& out) {
    spectrum(0) = spectrum(0).real();
    spectrum(n_ / 2) = spectrum(n_ / 2).real();
    fft_.inv(out, spectrum, n_);
  }

 private:
  Index n_;
  Eigen::FFT<double> fft_;
};

Eigen::VectorXd reflect_pad(const Eigen::Ref<const Eigen::VectorXd>& x, Index pad) {
  const Index n = x.size();
  Eigen::VectorXd out(n + 2 * pad);
  out.segment(pad, n) = x;
  for (Index j = 1; j <= pad; ++j) {
    out(pad - j) = x(j);
    out(pad + n - 1 + j) = x(n - 1 - j);
  }
  return out;
}

// Adjoint of reflect_pad: fold the padded gradient back onto the signal.
Eigen::VectorXd reflect_fold(const Eigen::VectorXd& padded, Index n, Index pad) {
  Eigen::VectorXd out = padded.segment(pad, n);
  for (Index j = 1; j <= pad; ++j) {
    out(j) += padded(pad - j);
    out(n - 1 - j) += padded(pad + n - 1 + j);
  }
  return out;
}

// Summed squared window at every padded position.
Eigen::VectorXd window_power(const Eigen::VectorXd& window, const StftConfig& cfg) {
  Eigen::VectorXd den = Eigen::VectorXd::Zero(cfg.padded_length());
  for (Index t = 0; t < cfg.frames(); ++t)
    den.segment(t * cfg.hop, cfg.dft_length) += window.cwiseAbs2();
  return den;
}

void check_spec(const Spectrogram& spec, const StftConfig& cfg) {
  if (spec.bins() != cfg.bins() || spec.frames() != cfg.frames() || spec.im.rows() != spec.re.rows() ||
      spec.im.cols() != spec.re.cols())
    throw UsageError("spectrogram shape " + std::to_string(spec.bins()) + "x" +
                     std::to_string(spec.frames()) + " does not match STFT geometry " +
                     std::to_string(cfg.bins()) + "x" + std::to_string(cfg.frames()));
}

void check_length(Index n, const StftConfig& cfg) {
  if (n != cfg.segment_length)
    throw UsageError("segment has " + std::to_string(n) + " samples, expected " +
                     std::to_string(cfg.segment_length));
}

}  // namespace

void StftConfig::validate() const {
  if (dft_length < 4 || dft_length % 2 != 0) throw UsageError("DFT length must be even and >= 4");
  if (hop * 2 != dft_length) throw UsageError("hop must be half the DFT length");
  if (centered && segment_length <= pad()) throw UsageError("segment too short for reflect padding");
  if (padded_length() < dft_length) throw UsageError("segment shorter than one frame");
}

bool Segment::out_of_range() const { return samples.size() > 0 && samples.cwiseAbs().maxCoeff() > 1.0; }

Eigen::VectorXd hann_window(Index length) {
  Eigen::VectorXd w(length);
  for (Index n = 0; n < length; ++n)
    w(n) = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(length));
  return w;
}

std::vector<Segment> segment_signal(const Eigen::VectorXd& signal, PadPolicy policy, Index length) {
  if (length <= 0) throw UsageError("segment length must be positive");
  std::vector<Segment> out;
  const Index full = signal.size() / length;
  const Index rest = signal.size() % length;
  out.reserve(static_cast<std::size_t>(full + 1));
  for (Index k = 0; k < full; ++k) out.emplace_back(signal.segment(k * length, length));
  if (rest > 0 && policy == PadPolicy::zero_pad_last) {
    Eigen::VectorXd last = Eigen::VectorXd::Zero(length);
    last.head(rest) = signal.tail(rest);
    out.emplace_back(std::move(last));
  }
  return out;
}

Spectrogram stft(const Eigen::Ref<const Eigen::VectorXd>& segment, const StftConfig& cfg) {
  cfg.validate();
  check_length(segment.size(), cfg);
  const Index n = cfg.dft_length;
  const Eigen::VectorXd window = hann_window(n);
  const Eigen::VectorXd padded = cfg.centered ? reflect_pad(segment, cfg.pad()) : Eigen::VectorXd(segment);

  Spectrogram out(cfg.bins(), cfg.frames());
  RealFft fft(n);
  Eigen::VectorXd frame(n);
  Eigen::VectorXcd bins;
  for (Index t = 0; t < cfg.frames(); ++t) {
    frame = window.cwiseProduct(padded.segment(t * cfg.hop, n));
    fft.forward(frame, bins);
    out.re.col(t) = bins.real();
    out.im.col(t) = bins.imag();
  }
  return out;
}

Eigen::VectorXd istft(const Spectrogram& spec, const StftConfig& cfg) {
  cfg.validate();
  check_spec(spec, cfg);
  const Index n = cfg.dft_length;
  const Eigen::VectorXd window = hann_window(n);
  const Eigen::VectorXd den = window_power(window, cfg);

  Eigen::VectorXd acc = Eigen::VectorXd::Zero(cfg.padded_length());
  RealFft fft(n);
  Eigen::VectorXcd bins(cfg.bins());
  Eigen::VectorXd frame;
  for (Index t = 0; t < cfg.frames(); ++t) {
    bins.real() = spec.re.col(t);
    bins.imag() = spec.im.col(t);
    fft.inverse(bins, frame);
    acc.segment(t * cfg.hop, n) += window.cwiseProduct(frame);
  }
  return acc.segment(cfg.pad(), cfg.segment_length).cwiseQuotient(den.segment(cfg.pad(), cfg.segment_length));
}

Eigen::VectorXd stft_adjoint(const Spectrogram& grad, const StftConfig& cfg) {
  cfg.validate();
  check_spec(grad, cfg);
  const Index n = cfg.dft_length;
  const Eigen::VectorXd window = hann_window(n);

  Eigen::VectorXd padded = Eigen::VectorXd::Zero(cfg.padded_length());
  RealFft fft(n);
  Eigen::VectorXcd bins(cfg.bins());
  Eigen::VectorXd frame;
  for (Index t = 0; t < cfg.frames(); ++t) {
    // Re(sum_k G_k e^{+i 2 pi k m / n}) over the half spectrum, via a Hermitian inverse.
    bins.real() = grad.re.col(t);
    bins.imag() = grad.im.col(t);
    bins.segment(1, n / 2 - 1) *= 0.5;
    fft.inverse(bins, frame);
    padded.segment(t * cfg.hop, n) += static_cast<double>(n) * window.cwiseProduct(frame);
  }
  if (!cfg.centered) return padded;
  return reflect_fold(padded, cfg.segment_length, cfg.pad());
}

Spectrogram istft_adjoint(const Eigen::Ref<const Eigen::VectorXd>& grad, const StftConfig& cfg) {
  cfg.validate();
  check_length(grad.size(), cfg);
  const Index n = cfg.dft_length;
  const Eigen::VectorXd window = hann_window(n);
  const Eigen::VectorXd den = window_power(window, cfg);

  Eigen::VectorXd padded = Eigen::VectorXd::Zero(cfg.padded_length());
  padded.segment(cfg.pad(), cfg.segment_length) = grad.cwiseQuotient(den.segment(cfg.pad(), cfg.segment_length));

  Spectrogram out(cfg.bins(), cfg.frames());
  RealFft fft(n);
  Eigen::VectorXd frame(n);
  Eigen::VectorXcd bins;
  Eigen::VectorXd weight = Eigen::VectorXd::Constant(cfg.bins(), 2.0 / static_cast<double>(n));
  weight(0) = weight(cfg.bins() - 1) = 1.0 / static_cast<double>(n);
  for (Index t = 0; t < cfg.frames(); ++t) {
    frame = window.cwiseProduct(padded.segment(t * cfg.hop, n));
    fft.forward(frame, bins);
    out.re.col(t) = weight.cwiseProduct(bins.real());
    out.im.col(t) = weight.cwiseProduct(bins.imag());
    out.im(0, t) = 0.0;
    out.im(cfg.bins() - 1, t) = 0.0;
  }
  return out;
}

double snr_db(const Eigen::Ref<const Eigen::VectorXd>& host, const Eigen::Ref<const Eigen::VectorXd>& marked) {
  if (host.size() != marked.size()) throw UsageError("snr_db: length mismatch");
  const double signal = host.squaredNorm();
  if (signal == 0.0) throw UsageError("snr_db: host is all zeros");
  const double noise = (host - marked).squaredNorm();
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / noise);
}

}  // namespace nmrwm
