#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "nmrwm/error.hpp"
#include "nmrwm/losses.hpp"

using namespace nmrwm;
using Eigen::Index;

namespace {

const EarModelTables& tables() {
  static const EarModelTables t = build_ear_tables();
  return t;
}

struct Fixture {
  Spectrogram host, marked;
  SoftMessage predicted;
  BitMessage target;
};

Fixture fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  Eigen::VectorXd x(kSegmentLength);
  for (auto& v : x) v = g(rng);
  Fixture f;
  f.host = stft(x);
  f.marked = f.host;
  for (Index i = 0; i < f.marked.re.size(); ++i) {
    f.marked.re.data()[i] += 0.01 * g(rng);
    f.marked.im.data()[i] += 0.01 * g(rng);
  }
  f.target = BitMessage::random(64, rng);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  f.predicted.resize(64);
  for (auto& p : f.predicted) p = u(rng);
  return f;
}

}  // namespace

TEST(Bce, Half) {
  std::mt19937_64 rng(1);
  EXPECT_NEAR(bce(SoftMessage::Constant(256, 0.5), BitMessage::random(256, rng)), std::log(2.0), 1e-12);
}

TEST(Bce, PerfectPrediction) {
  const BitMessage m({1, 0, 1, 1, 0});
  SoftMessage p(5);
  for (int i = 0; i < 5; ++i) p(i) = m[static_cast<std::size_t>(i)];
  const double v = bce(p, m);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.2e-7);
}

TEST(Bce, HandValue) {
  SoftMessage p(2);
  p << 0.9, 0.2;
  EXPECT_NEAR(bce(p, BitMessage({1, 0})), -(std::log(0.9) + std::log(0.8)) / 2.0, 1e-12);
  EXPECT_NEAR(bce(p, BitMessage({1, 0})), 0.16425, 1e-5);
}

TEST(Bce, LengthMismatch) {
  EXPECT_THROW(bce(SoftMessage::Constant(3, 0.5), BitMessage(4)), UsageError);
}

TEST(Bce, GradientMatchesDifferences) {
  const auto f = fixture(2);
  const auto g = bce_gradient(f.predicted, f.target);
  for (Index i = 0; i < 64; i += 7) {
    SoftMessage up = f.predicted, down = f.predicted;
    up(i) += 1e-6;
    down(i) -= 1e-6;
    EXPECT_NEAR(g(i), (bce(up, f.target) - bce(down, f.target)) / 2e-6, 1e-6 * std::abs(g(i)) + 1e-9);
  }
}

TEST(MseSpec, Values) {
  Spectrogram h(513, 96), m(513, 96);
  EXPECT_EQ(mse_spec(h, m), 0.0);
  m.im(7, 3) = 2.0;
  EXPECT_NEAR(mse_spec(h, m), 4.0 / (2.0 * 513 * 96), 1e-15);
  EXPECT_NEAR(mse_spec(h, m), 4.061e-5, 1e-8);
  m.im(7, 3) = 6.0;
  EXPECT_NEAR(mse_spec(h, m), 9.0 * 4.0 / (2.0 * 513 * 96), 1e-15);
}

TEST(MseSpec, Gradient) {
  const auto f = fixture(3);
  const auto g = mse_spec_gradient(f.host, f.marked);
  Spectrogram up = f.marked, down = f.marked;
  up.re(40, 20) += 1e-5;
  down.re(40, 20) -= 1e-5;
  EXPECT_NEAR(g.re(40, 20), (mse_spec(f.host, up) - mse_spec(f.host, down)) / 2e-5, 1e-10);
}

TEST(LossWeights, Range) {
  EXPECT_THROW(LossWeights(-0.1), UsageError);
  EXPECT_THROW(LossWeights(1.5), UsageError);
  EXPECT_NO_THROW(LossWeights(0.0));
  EXPECT_NO_THROW(LossWeights(1.0));
}

TEST(CombinedLoss, Endpoints) {
  const auto f = fixture(4);
  for (auto mode : {DistortionMode::nmr, DistortionMode::mse}) {
    const auto r0 = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(0.0), mode, tables());
    EXPECT_DOUBLE_EQ(r0.value, bce(f.predicted, f.target));
    EXPECT_EQ(r0.marked_grad.re.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(r0.marked_grad.im.cwiseAbs().maxCoeff(), 0.0);
    const auto r1 = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(1.0), mode, tables());
    EXPECT_DOUBLE_EQ(r1.value, r1.distortion);
    EXPECT_EQ(r1.predicted_grad.cwiseAbs().maxCoeff(), 0.0);
  }
  const auto rn = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(1.0), DistortionMode::nmr, tables());
  EXPECT_DOUBLE_EQ(rn.distortion, nmr(f.host, f.marked, tables()));
  const auto rm = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(1.0), DistortionMode::mse, tables());
  EXPECT_DOUBLE_EQ(rm.distortion, mse_spec(f.host, f.marked));
}

TEST(CombinedLoss, AffineInAlpha) {
  const auto f = fixture(5);
  const auto r = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(0.5), DistortionMode::nmr, tables());
  EXPECT_NEAR(r.value, 0.5 * r.distortion + 0.5 * r.message, 1e-15);
  EXPECT_NEAR(0.5 * 0.02 + 0.5 * 0.7, 0.36, 1e-15);
  for (double a : {0.1, 0.37, 0.9}) {
    const auto ra = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(a), DistortionMode::nmr, tables());
    EXPECT_NEAR(ra.value, a * (r.distortion - r.message) + r.message, 1e-12);
  }
}

TEST(CombinedLoss, CachedMaskingAgrees) {
  const auto f = fixture(6);
  const PatternGrid m = masking_patterns(f.host, tables());
  const auto a = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(0.3), DistortionMode::nmr, tables());
  const auto b = combined_loss(f.host, f.marked, f.predicted, f.target, LossWeights(0.3), DistortionMode::nmr, tables(), &m);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ((a.marked_grad.re - b.marked_grad.re).cwiseAbs().maxCoeff(), 0.0);
}
