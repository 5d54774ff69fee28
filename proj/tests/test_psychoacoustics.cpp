#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "nmrwm/error.hpp"
#include "nmrwm/psychoacoustics.hpp"
#include "nmrwm/selfcheck.hpp"

using namespace nmrwm;
using Eigen::Index;

namespace {

const EarModelTables& tables() {
  static const EarModelTables t = build_ear_tables();
  return t;
}

Spectrogram random_spec(std::uint64_t seed, double amp = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, amp);
  Spectrogram s(513, 96);
  for (Index i = 0; i < s.re.size(); ++i) {
    s.re.data()[i] = g(rng);
    s.im.data()[i] = g(rng);
  }
  return s;
}

Spectrogram noisy_host(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  Eigen::VectorXd x(kSegmentLength);
  for (auto& v : x) v = g(rng);
  return stft(x);
}

double bin_hz(Index k) { return static_cast<double>(k) * kSampleRate / 1024.0; }

}  // namespace

TEST(EarTables, BandCountFromBarkScale) {
  const double z_lo = 7.0 * std::asinh(80.0 / 650.0);
  const double z_hi = 7.0 * std::asinh(18000.0 / 650.0);
  EXPECT_NEAR(z_lo, 0.859, 1e-3);
  EXPECT_NEAR(z_hi, 28.102, 1e-3);
  EXPECT_NEAR((z_hi - z_lo) / 0.25, 108.97, 1e-2);
  EXPECT_EQ(tables().bands(), 109);
  EXPECT_NEAR(hz_to_bark(bark_to_hz(13.3)), 13.3, 1e-12);
}

TEST(EarTables, ColumnSumsInRange) {
  const auto& t = tables();
  int covered = 0;
  for (Index k = 0; k < t.band_map.cols(); ++k) {
    if (bin_hz(k) < 80.0 || bin_hz(k) > 18000.0) continue;
    ++covered;
    EXPECT_NEAR(t.band_map.col(k).sum(), 1.0, 1e-9) << "bin " << k;
  }
  EXPECT_EQ(covered, 417 - 2 + 1);
  EXPECT_GE(t.band_map.minCoeff(), 0.0);
  EXPECT_LE(t.band_map.maxCoeff(), 1.0);
}

TEST(EarTables, EarWeightZeroOutsideRange) {
  const auto& t = tables();
  EXPECT_EQ(t.ear_weight(0), 0.0);
  EXPECT_EQ(t.ear_weight(1), 0.0);
  EXPECT_GT(t.ear_weight(2), 0.0);
  EXPECT_EQ(t.ear_weight(512), 0.0);
  EXPECT_LT(t.masking_offset.maxCoeff(), 1.0);
}

TEST(PitchPatterns, ZeroAndQuadratic) {
  const auto& t = tables();
  EXPECT_EQ(pitch_patterns(Spectrogram(513, 96), t).cwiseAbs().maxCoeff(), 0.0);
  const auto s = random_spec(1);
  Spectrogram s2(2.0 * s.re, 2.0 * s.im);
  const auto p = pitch_patterns(s, t), p2 = pitch_patterns(s2, t);
  EXPECT_LT((p2 - 4.0 * p).cwiseAbs().maxCoeff(), 1e-9 * p2.cwiseAbs().maxCoeff());
}

TEST(PitchPatterns, SingleBinPicksUColumn) {
  const auto& t = tables();
  const Index b = 100, frame = 30;
  Spectrogram s(513, 96);
  s.re(b, frame) = 1.0 / (t.calibration_gain * t.ear_weight(b));
  const auto p = pitch_patterns(s, t);
  EXPECT_LT((p.col(frame) - t.band_map.col(b)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(p.col(frame + 1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SpreadFrequency, Zero) {
  EXPECT_EQ(spread_frequency(PatternGrid::Zero(109, 4), tables()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SpreadFrequency, SingleBandDecaysBothWays) {
  for (Index src : {Index{10}, Index{54}, Index{100}}) {
    PatternGrid p = PatternGrid::Zero(109, 1);
    p(src, 0) = 1e6;
    const auto e = spread_frequency(p, tables());
    EXPECT_GT(e.minCoeff(), 0.0);
    for (Index c = src + 1; c < 109; ++c) EXPECT_LT(e(c, 0), e(c - 1, 0)) << src << " up " << c;
    for (Index c = src - 1; c >= 0; --c) EXPECT_LT(e(c, 0), e(c + 1, 0)) << src << " down " << c;
    // Roughly linear decay in dB below the source.
    if (src >= 6) {
      const double d1 = 10 * std::log10(e(src - 2, 0) / e(src - 4, 0));
      const double d2 = 10 * std::log10(e(src - 4, 0) / e(src - 6, 0));
      EXPECT_NEAR(d1, d2, 0.5);
    }
  }
}

TEST(SpreadFrequency, Monotone) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1e4);
  PatternGrid a(109, 8), b(109, 8);
  for (Index i = 0; i < a.size(); ++i) {
    a.data()[i] = u(rng);
    b.data()[i] = a.data()[i] + u(rng);
  }
  const auto sa = spread_frequency(a, tables()), sb = spread_frequency(b, tables());
  EXPECT_TRUE(((sb - sa).array() >= -1e-9 * sb.array()).all());
}

TEST(SpreadTime, ConstantIsFixedPoint) {
  PatternGrid e = PatternGrid::Constant(109, 96, 3.5);
  EXPECT_LT((spread_time(e, tables()) - e).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(spread_time(PatternGrid::Zero(109, 96), tables()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SpreadTime, ImpulseDecaysWithBandCoefficient) {
  const auto& t = tables();
  PatternGrid e = PatternGrid::Zero(109, 96);
  e.col(10).setConstant(2.0);
  const auto out = spread_time(e, t);
  for (Index c = 0; c < 109; ++c) {
    EXPECT_EQ(out(c, 9), 0.0);
    EXPECT_DOUBLE_EQ(out(c, 10), 2.0);
    for (Index k = 11; k < 20; ++k) {
      EXPECT_NEAR(out(c, k) / out(c, k - 1), t.time_spread_coeffs(c), 1e-12);
      EXPECT_LE(out(c, k), 2.0);
    }
  }
}

TEST(Masking, SilentHostIsConstantFloor) {
  const auto& t = tables();
  const auto m = masking_patterns(Spectrogram(513, 96), t);
  EXPECT_GT(m.minCoeff(), 0.0);
  for (Index k = 1; k < 96; ++k) EXPECT_LT((m.col(k) - m.col(0)).cwiseAbs().maxCoeff(), 1e-12 * m.maxCoeff());
  const PatternGrid floor = spread_frequency(PatternGrid(t.internal_noise), t);
  const Eigen::VectorXd expected = t.masking_offset.cwiseProduct(floor.col(0));
  EXPECT_LT((m.col(0) - expected).cwiseAbs().maxCoeff(), 1e-12 * expected.maxCoeff());
}

TEST(Masking, IncreasesWithLevel) {
  const auto host = noisy_host(8);
  const auto m1 = masking_patterns(host, tables());
  const auto m2 = masking_patterns(Spectrogram(2.0 * host.re, 2.0 * host.im), tables());
  EXPECT_TRUE((m2.array() > m1.array()).all());
}

TEST(Masking, BelowPitchAtPeaks) {
  Eigen::VectorXd x(kSegmentLength);
  for (Index n = 0; n < x.size(); ++n) {
    const double s = static_cast<double>(n) / kSampleRate;
    x(n) = 0.3 * std::sin(2 * std::numbers::pi * 440.0 * s) + 0.2 * std::sin(2 * std::numbers::pi * 1320.0 * s) +
           0.1 * std::sin(2 * std::numbers::pi * 5000.0 * s);
  }
  const auto host = stft(x);
  const auto p = pitch_patterns(host, tables());
  const auto m = masking_patterns(host, tables());
  for (Index f = 5; f < 90; f += 7) {
    Index peak;
    p.col(f).maxCoeff(&peak);
    EXPECT_LT(m(peak, f), p(peak, f) * std::pow(10.0, -0.3)) << "frame " << f;
  }
}

TEST(NoisePatterns, ZeroAndQuadratic) {
  const auto& t = tables();
  const auto host = random_spec(2), e = random_spec(3, 0.01);
  EXPECT_EQ(noise_patterns(host, host, t).cwiseAbs().maxCoeff(), 0.0);
  const Spectrogram m1(host.re + e.re, host.im + e.im);
  const Spectrogram m3(host.re + 3.0 * e.re, host.im + 3.0 * e.im);
  const auto n1 = noise_patterns(host, m1, t), n3 = noise_patterns(host, m3, t);
  EXPECT_LT((n3 - 9.0 * n1).cwiseAbs().maxCoeff(), 1e-9 * n3.maxCoeff());
}

TEST(NoisePatterns, PhaseRotationCounts) {
  const auto& t = tables();
  const Index b = 60, frame = 12;
  const double r = 0.8, theta = 0.3;
  Spectrogram host(513, 96), marked(513, 96);
  host.re(b, frame) = r;
  marked.re(b, frame) = r * std::cos(theta);
  marked.im(b, frame) = r * std::sin(theta);
  const auto n = noise_patterns(host, marked, t);
  const double w2 = std::pow(t.calibration_gain * t.ear_weight(b), 2);
  const Eigen::VectorXd expected = t.band_map.col(b) * (w2 * 2.0 * r * r * (1.0 - std::cos(theta)));
  EXPECT_LT((n.col(frame) - expected).cwiseAbs().maxCoeff(), 1e-12 * expected.maxCoeff());
  EXPECT_GT(n.col(frame).sum(), 0.0);
  // Magnitudes are equal, so a magnitude-difference formulation sees nothing.
  EXPECT_NEAR(std::hypot(marked.re(b, frame), marked.im(b, frame)), r, 1e-15);
}

TEST(Nmr, Axioms) {
  const auto& t = tables();
  const auto host = noisy_host(5);
  EXPECT_EQ(nmr(host, host, t), 0.0);
  const auto e = random_spec(6, 0.01);
  const Spectrogram m1(host.re + e.re, host.im + e.im), m2(host.re + 2 * e.re, host.im + 2 * e.im);
  const double a = nmr(host, m1, t), b = nmr(host, m2, t);
  EXPECT_GT(a, 0.0);
  EXPECT_NEAR(b, 4.0 * a, 1e-12 * b);
}

TEST(Nmr, SingleCellAverage) {
  const auto& t = tables();
  // A bin lying inside a single band.
  Index b = -1, band = -1;
  for (Index k = 300; k < 418 && b < 0; ++k)
    for (Index c = 0; c < 109; ++c)
      if (t.band_map(c, k) == 1.0) {
        b = k;
        band = c;
        break;
      }
  ASSERT_GE(b, 0);
  Spectrogram host(513, 96), marked(513, 96);
  marked.re(b, 40) = 0.5;
  const auto noise = noise_patterns(host, marked, t);
  PatternGrid mask = PatternGrid::Ones(109, 96);
  mask(band, 40) = noise(band, 40);
  EXPECT_NEAR(nmr(mask, host, marked, t), 1.0 / (109.0 * 96.0), 1e-15);
  EXPECT_NEAR(1.0 / (109.0 * 96.0), 9.5566e-5, 1e-9);
}

TEST(NmrDb, Values) {
  EXPECT_DOUBLE_EQ(nmr_db(1.0), 0.0);
  EXPECT_DOUBLE_EQ(nmr_db(0.0), -120.0);
  EXPECT_NEAR(std::pow(10.0, -18.0 / 10.0), 0.01585, 1e-5);
  EXPECT_NEAR(nmr_db(0.015849), -18.0, 1e-3);
}

TEST(NmrGradient, ZeroAtHostAndLinear) {
  const auto& t = tables();
  const auto host = noisy_host(9);
  const auto g0 = nmr_gradient(host, host, t);
  EXPECT_EQ(g0.re.cwiseAbs().maxCoeff(), 0.0);
  const auto e = random_spec(10, 0.01);
  const auto g1 = nmr_gradient(host, Spectrogram(host.re + e.re, host.im + e.im), t);
  const auto g2 = nmr_gradient(host, Spectrogram(host.re + 2 * e.re, host.im + 2 * e.im), t);
  EXPECT_LT((g2.re - 2 * g1.re).cwiseAbs().maxCoeff(), 1e-12 * g2.re.cwiseAbs().maxCoeff());
  EXPECT_LT((g2.im - 2 * g1.im).cwiseAbs().maxCoeff(), 1e-12 * g2.im.cwiseAbs().maxCoeff());
}

TEST(NmrGradient, FiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) EXPECT_LT(nmr_gradient_error(seed, 50), 1e-5);
}

TEST(NmrGradient, ShapeMismatch) {
  EXPECT_THROW(nmr_gradient(Spectrogram(513, 96), Spectrogram(513, 95), tables()), UsageError);
}

TEST(PatternCsv, Layout) {
  std::ostringstream os;
  const PatternGrid g = PatternGrid::Ones(109, 2);
  write_pattern_csv(os, g, g, g);
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "frame,band,pitch,mask,noise");
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 109 * 2);
}
