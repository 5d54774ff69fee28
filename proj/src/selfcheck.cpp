#include "nmrwm/selfcheck.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "nmrwm/autodiff/gradcheck.hpp"
#include "nmrwm/psychoacoustics.hpp"
#include "nmrwm/training.hpp"

namespace nmrwm {
namespace {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// Small geometry for the STFT bridges: N = 16, hop 8, 40 samples -> 9 bins x 6 frames.
const StftConfig kToyStft{16, 8, true, 40};

template <typename Scalar>
struct OpCase {
  std::vector<Tensor<Scalar>> inputs;
  std::function<Var<Scalar>(Tape<Scalar>&, const std::vector<Var<Scalar>>&)> build;
};

template <typename Scalar>
OpCase<Scalar> make_case(const std::string& op, std::uint64_t seed) {
  using V = std::vector<Var<Scalar>>;
  std::mt19937_64 rng(seed);
  auto rnd = [&](Shape s) { return ad::random_tensor<Scalar>(std::move(s), rng); };
  // Magnitudes in [0.1, 1] keep piecewise-linear ops away from their kink.
  auto off_kink = [&](Shape s) { return ad::random_tensor<Scalar>(std::move(s), rng, 0.1, 1.0, true); };
  std::uniform_int_distribution<Index> pick(2, 4);
  const Index b = 2, c = pick(rng), h = 2 * pick(rng), w = 2 * pick(rng);

  if (op == "conv2d")
    return {{rnd({b, c, h, w}), rnd({3, c, 5, 5}), rnd({3})},
            [](Tape<Scalar>&, const V& v) { return ad::conv2d<Scalar>(v[0], v[1], v[2], 1); }};
  if (op == "conv2d_stride2")
    return {{rnd({b, c, h, w}), rnd({3, c, 5, 5})},
            [](Tape<Scalar>&, const V& v) { return ad::conv2d<Scalar>(v[0], v[1], std::nullopt, 2); }};
  if (op == "conv_transpose2d")
    return {{rnd({b, c, h / 2, w / 2}), rnd({c, 3, 5, 5})},
            [](Tape<Scalar>&, const V& v) { return ad::conv_transpose2d(v[0], v[1]); }};
  if (op == "batch_norm2d_train" || op == "batch_norm2d_eval") {
    const bool train = op == "batch_norm2d_train";
    Tensor<Scalar> mean = rnd({c});
    Tensor<Scalar> var = ad::random_tensor<Scalar>({c}, rng, 0.5, 2.0);
    return {{rnd({b, c, h, w}), rnd({c}), rnd({c})}, [train, mean, var](Tape<Scalar>&, const V& v) {
              return ad::batch_norm2d(v[0], v[1], v[2], mean, var, train ? ad::Mode::train : ad::Mode::eval);
            }};
  }
  if (op == "leaky_relu")
    return {{off_kink({b, c, h})}, [](Tape<Scalar>&, const V& v) { return ad::leaky_relu(v[0], Scalar(0.2)); }};
  if (op == "relu") return {{off_kink({b, c, h})}, [](Tape<Scalar>&, const V& v) { return ad::relu(v[0]); }};
  if (op == "sigmoid") {
    auto x = rnd({b, c, h});
    x.array() *= Scalar(4);
    return {{x}, [](Tape<Scalar>&, const V& v) { return ad::sigmoid(v[0]); }};
  }
  if (op == "dropout") {
    const auto mask_seed = seed + 1;
    return {{rnd({b, c, h})}, [mask_seed](Tape<Scalar>&, const V& v) {
              std::mt19937_64 r(mask_seed);
              return ad::dropout(v[0], 0.5, ad::Mode::train, r);
            }};
  }
  if (op == "add")
    return {{rnd({b, c, h}), rnd({b, c, h})}, [](Tape<Scalar>&, const V& v) { return ad::add(v[0], v[1]); }};
  if (op == "scale") return {{rnd({b, c, h})}, [](Tape<Scalar>&, const V& v) { return ad::scale(v[0], Scalar(-1.5)); }};
  if (op == "dot") {
    const auto weights = rnd({b, c});
    return {{rnd({b, c})}, [weights](Tape<Scalar>&, const V& v) { return ad::dot(v[0], weights); }};
  }
  if (op == "sum") return {{rnd({b, c, h})}, [](Tape<Scalar>&, const V& v) { return ad::sum(v[0]); }};
  if (op == "dense")
    return {{rnd({b, h * w}), rnd({c, h * w}), rnd({c})},
            [](Tape<Scalar>&, const V& v) { return ad::dense(v[0], v[1], v[2]); }};
  if (op == "reshape")
    return {{rnd({b, c, h, w})}, [](Tape<Scalar>&, const V& v) {
              return ad::reshape(v[0], {v[0].dim(0), v[0].dim(1) * v[0].dim(2) * v[0].dim(3)});
            }};
  if (op == "concat_channels")
    return {{rnd({b, c, h, w}), rnd({b, 3, h, w})},
            [](Tape<Scalar>&, const V& v) { return ad::concat_channels(v[0], v[1]); }};
  if (op == "crop")
    return {{rnd({b, c, h, w})}, [h, w](Tape<Scalar>&, const V& v) {
              return ad::crop(v[0], ad::Region{1, h - 2, 1, w - 1});
            }};
  if (op == "insert")
    return {{rnd({b, c, h, w}), rnd({b, c, h / 2, w / 2})},
            [](Tape<Scalar>&, const V& v) { return ad::insert(v[0], v[1], 1, 1); }};
  if (op == "replicate")
    return {{rnd({b, c})}, [h, w](Tape<Scalar>&, const V& v) { return ad::replicate(v[0], h / 2, w / 2); }};
  if (op == "stft_bridge")
    return {{rnd({b, kToyStft.segment_length})},
            [](Tape<Scalar>&, const V& v) { return ad::stft_bridge(v[0], kToyStft); }};
  if (op == "istft_bridge")
    return {{rnd({b, 2, kToyStft.bins(), kToyStft.frames()})},
            [](Tape<Scalar>&, const V& v) { return ad::istft_bridge(v[0], kToyStft); }};
  throw UsageError("unknown op " + op);
}

template <typename Scalar>
double op_error(const std::string& op, std::uint64_t seed, double step) {
  const auto c = make_case<Scalar>(op, seed);
  return ad::gradient_check<Scalar>(c.inputs, c.build, seed ^ 0xabcdefULL, step);
}

CheckOutcome outcome(std::string name, bool passed, const std::string& detail) {
  return {std::move(name), passed, detail};
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

}  // namespace

const std::vector<std::string>& differentiable_ops() {
  static const std::vector<std::string> ops{
      "conv2d", "conv2d_stride2", "conv_transpose2d", "batch_norm2d_train", "batch_norm2d_eval",
      "leaky_relu", "relu", "sigmoid", "dropout", "add", "scale", "dot", "sum", "dense", "reshape",
      "concat_channels", "crop", "insert", "replicate", "stft_bridge", "istft_bridge"};
  return ops;
}

double op_gradient_error_f64(const std::string& op, std::uint64_t seed) { return op_error<double>(op, seed, 1e-6); }
double op_gradient_error_f32(const std::string& op, std::uint64_t seed) { return op_error<float>(op, seed, 1e-2); }

double nmr_gradient_error(std::uint64_t seed, int coords) {
  static const EarModelTables tables = build_ear_tables();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  const StftConfig& cfg = tables.stft;
  Eigen::VectorXd x(cfg.segment_length);
  for (auto& v : x) v = 0.1 * gauss(rng);
  const Spectrogram host = stft(x, cfg);
  Spectrogram marked = host;
  for (Index t = 0; t < host.frames(); ++t)
    for (Index f = 0; f < host.bins(); ++f) {
      marked.re(f, t) += 0.01 * gauss(rng);
      marked.im(f, t) += 0.01 * gauss(rng);
    }
  const PatternGrid mask = masking_patterns(host, tables);
  const Spectrogram g = nmr_gradient(mask, host, marked, tables);

  // Coordinates inside the 80 Hz .. 18 kHz range carry non-zero gradient.
  std::uniform_int_distribution<Index> bin(3, 415), frame(0, host.frames() - 1);
  std::bernoulli_distribution imag(0.5);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (int k = 0; k < coords; ++k) {
    const Index f = bin(rng), t = frame(rng);
    auto& plane = imag(rng) ? marked.im : marked.re;
    const double a = (&plane == &marked.im ? g.im : g.re)(f, t);
    const double orig = plane(f, t);
    const double h = 1e-4 * std::max(1e-3, std::abs(orig));
    plane(f, t) = orig + h;
    const double up = nmr(mask, host, marked, tables);
    plane(f, t) = orig - h;
    const double down = nmr(mask, host, marked, tables);
    plane(f, t) = orig;
    const double numeric = (up - down) / (2.0 * h);
    diff2 += (a - numeric) * (a - numeric);
    a2 += a * a;
    n2 += numeric * numeric;
  }
  const double scale = std::sqrt(std::max(a2, n2));
  return scale > 0.0 ? std::sqrt(diff2) / scale : std::sqrt(diff2);
}

std::vector<CheckOutcome> run_selfcheck(std::uint64_t seed) {
  std::vector<CheckOutcome> out;

  const EarModelTables tables = build_ear_tables();
  double col_dev = 0.0;
  const double bin_hz = tables.sample_rate / static_cast<double>(tables.stft.dft_length);
  for (Index k = 0; k < tables.band_map.cols(); ++k) {
    const double hz = static_cast<double>(k) * bin_hz;
    if (hz >= 80.0 && hz <= 18000.0) col_dev = std::max(col_dev, std::abs(tables.band_map.col(k).sum() - 1.0));
  }
  out.push_back(outcome("band map", tables.bands() == 109 && col_dev < 1e-9,
                        std::to_string(tables.bands()) + " bands, max |column sum - 1| = " + num(col_dev)));

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double rec = 0.0;
  for (int i = 0; i < 20; ++i) {
    Eigen::VectorXd x(kSegmentLength);
    for (auto& v : x) v = u(rng);
    rec = std::max(rec, (istft(stft(x)) - x).cwiseAbs().maxCoeff());
  }
  out.push_back(outcome("stft reconstruction", rec < 1e-6, "max abs error " + num(rec)));

  double nmr_err = 0.0;
  for (std::uint64_t k = 0; k < 3; ++k) nmr_err = std::max(nmr_err, nmr_gradient_error(seed + k));
  out.push_back(outcome("nmr gradient", nmr_err < 1e-5, "relative error " + num(nmr_err)));

  for (const auto& op : differentiable_ops()) {
    double e64 = 0.0, e32 = 0.0;
    for (std::uint64_t k = 0; k < 2; ++k) {
      e64 = std::max(e64, op_gradient_error_f64(op, seed + k));
      e32 = std::max(e32, op_gradient_error_f32(op, seed + k));
    }
    out.push_back(outcome("gradient " + op, e64 < 1e-5 && e32 < 1e-3,
                          "relative error f64 " + num(e64) + ", f32 " + num(e32)));
  }

  const WatermarkModel model = WatermarkModel::initialized(NetworkConfig::desk(), seed);
  const Corpus corpus(synthetic_segments(24, seed), tables);
  EvalOptions eo;
  eo.seed = seed;
  const double null_ber = evaluate(model, corpus, tables, eo).ber;
  out.push_back(outcome("untrained BER", std::abs(null_ber - 0.5) < 0.1, "BER " + num(null_ber)));
  return out;
}

}  // namespace nmrwm
