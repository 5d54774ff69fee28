#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nmrwm/audio_core.hpp"
#include "nmrwm/autodiff/ops.hpp"
#include "nmrwm/autodiff/params.hpp"
#include "nmrwm/autodiff/tape.hpp"
#include "nmrwm/message.hpp"

namespace nmrwm {

using ad::Index;

/// Embedder/extractor topology.
struct NetworkConfig {
  int message_bits = 256;
  std::array<Index, 4> encoder_channels{32, 64, 128, 256};
  std::array<Index, 3> extractor_channels{32, 64, 128};
  Index top_channels = 16;   // channels of the topmost upsampling unit
  ad::Region crop{3, 128, 16, 64};  // embedder input: bins 3..130, frames 16..79
  Index extractor_rows = 160;        // extractor input: bins 0..159, all frames
  double leaky_slope = 0.2;
  double dropout = 0.5;
  StftConfig stft;

  static NetworkConfig full(int message_bits = 256);
  /// Reduced widths for tests and desk-scale training.
  static NetworkConfig desk();

  /// Throws UsageError if the geometry is inconsistent.
  void validate() const;

  Index bottleneck_rows() const { return crop.rows / 16; }
  Index bottleneck_cols() const { return crop.cols / 16; }
  Index extractor_out_rows() const { return (extractor_rows + 7) / 8; }
  Index extractor_out_cols() const { return (stft.frames() + 7) / 8; }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct LayerShape {
  std::string name;
  ad::Shape shape;
  bool trainable = true;
};

/// Every parameter and running statistic of the embedder and extractor, in storage order.
std::vector<LayerShape> parameter_manifest(const NetworkConfig& cfg);

/// Human-readable manifest, one "name shape" line per entry, plus a total line.
std::string manifest_text(const NetworkConfig& cfg);

/// Feature-map shapes of one forward pass, "stage CxHxW" per line.
std::string shape_trace(const NetworkConfig& cfg);

namespace detail {

inline double init_gain(double slope) { return std::sqrt(2.0 / (1.0 + slope * slope)); }

}  // namespace detail

/// Kaiming-uniform weights (gain for leaky slope 0.2), unit batch-norm scale, zero shift,
/// running mean 0 and variance 1.
template <typename Scalar>
ad::ParamStore<Scalar> init_parameters(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ad::ParamStore<Scalar> store;
  Index fan_in = 1;  // of the most recent weight; biases follow their weight
  for (const auto& layer : parameter_manifest(cfg)) {
    ad::Tensor<Scalar> t(layer.shape);
    const auto& n = layer.name;
    auto ends_with = [&](const std::string& s) {
      return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".gamma") || ends_with(".running_var")) {
      t.array().setConstant(Scalar(1));
    } else if (ends_with(".weight") || ends_with(".bias")) {
      if (ends_with(".weight")) {
        // conv [Cout, Cin, 5, 5] and dense [L, K] sum over dim 1; transposed conv
        // [Cin, Cout, 5, 5] receives from dim 0.
        const bool transposed = n.find(".up") != std::string::npos;
        fan_in = transposed ? layer.shape[0] : layer.shape[1];
        for (std::size_t i = 2; i < layer.shape.size(); ++i) fan_in *= layer.shape[i];
      }
      const double bound = ends_with(".weight")
                               ? detail::init_gain(cfg.leaky_slope) * std::sqrt(3.0 / static_cast<double>(fan_in))
                               : 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(u(rng));
    }
    store.add(layer.name, std::move(t), layer.trainable);
  }
  return store;
}

/// Zeroes the last embedder convolution so that the watermark patch is zero.
template <typename Scalar>
void zero_final_embedder_layer(ad::ParamStore<Scalar>& store) {
  store.at("embedder.out.weight").value.array().setZero();
  store.at("embedder.out.bias").value.array().setZero();
}

/// Parameters and mode shared by the network forward functions. `stats` receives
/// batch-norm running-statistic updates in train mode and may be null otherwise.
template <typename Scalar>
struct ForwardContext {
  ad::Tape<Scalar>& tape;
  const ad::ParamStore<Scalar>& params;
  ad::Mode mode = ad::Mode::eval;
  std::mt19937_64* rng = nullptr;
  ad::ParamStore<Scalar>* stats = nullptr;
  std::vector<std::pair<std::string, ad::Shape>>* trace = nullptr;

  void note(const std::string& stage, const ad::Var<Scalar>& v) const {
    if (trace) trace->emplace_back(stage, v.shape());
  }

  ad::Var<Scalar> param(const std::string& name) const { return tape.parameter(params.at(name)); }

  ad::Var<Scalar> batch_norm(const ad::Var<Scalar>& x, const std::string& prefix) const {
    const auto& mean = params.at(prefix + ".running_mean").value;
    const auto& var = params.at(prefix + ".running_var").value;
    ad::RunningStats<Scalar> update;
    if (mode == ad::Mode::train && stats) {
      update.mean = &stats->at(prefix + ".running_mean").value;
      update.var = &stats->at(prefix + ".running_var").value;
    }
    return ad::batch_norm2d(x, param(prefix + ".gamma"), param(prefix + ".beta"), mean, var, mode, update);
  }
};

/// U-Net embedder. host_crop: [B, 2, 128, 64], message: [B, L] with entries in {0, 1}.
/// Returns the watermarked patch [B, 2, 128, 64] = host_crop + network output.
template <typename Scalar>
ad::Var<Scalar> embedder_forward(const ForwardContext<Scalar>& ctx, const NetworkConfig& cfg,
                                 const ad::Var<Scalar>& host_crop, const ad::Var<Scalar>& message) {
  using namespace ad;
  const auto slope = static_cast<Scalar>(cfg.leaky_slope);
  if (message.shape().size() != 2 || message.dim(1) != cfg.message_bits)
    throw UsageError("embedder: message must be [B, " + std::to_string(cfg.message_bits) + "]");

  std::array<Var<Scalar>, 4> skips;
  Var<Scalar> h = host_crop;
  ctx.note("embedder.input", h);
  for (int i = 0; i < 4; ++i) {
    const std::string p = "embedder.down" + std::to_string(i + 1);
    h = conv2d<Scalar>(h, ctx.param(p + ".weight"), std::nullopt, 2);
    h = leaky_relu(ctx.batch_norm(h, p + ".bn"), slope);
    skips[static_cast<std::size_t>(i)] = h;
    ctx.note(p, h);
  }

  const auto bits = replicate(message, cfg.bottleneck_rows(), cfg.bottleneck_cols());
  const auto joined = concat_channels(h, bits);
  ctx.note("embedder.concat", joined);
  h = leaky_relu(conv2d<Scalar>(joined, ctx.param("embedder.embed.weight"), ctx.param("embedder.embed.bias"), 1), slope);
  ctx.note("embedder.embed", h);

  for (int i = 3; i >= 0; --i) {
    const std::string p = "embedder.up" + std::to_string(i + 1);
    h = conv_transpose2d(concat_channels(skips[static_cast<std::size_t>(i)], h), ctx.param(p + ".weight"));
    h = relu(ctx.batch_norm(h, p + ".bn"));
    if (i >= 2) {
      if (ctx.mode == Mode::train && !ctx.rng) throw UsageError("embedder: train mode needs an rng for dropout");
      if (ctx.rng) h = dropout(h, cfg.dropout, ctx.mode, *ctx.rng);
    }
    ctx.note(p, h);
  }
  const auto top = concat_channels(h, host_crop);
  ctx.note("embedder.top_concat", top);
  const auto out = add(host_crop, conv2d<Scalar>(top, ctx.param("embedder.out.weight"), ctx.param("embedder.out.bias"), 1));
  ctx.note("embedder.output", out);
  return out;
}

/// Extractor. spectrum: [B, 2, F, T] -> probabilities [B, L].
template <typename Scalar>
ad::Var<Scalar> extractor_forward(const ForwardContext<Scalar>& ctx, const NetworkConfig& cfg,
                                  const ad::Var<Scalar>& spectrum) {
  using namespace ad;
  const auto slope = static_cast<Scalar>(cfg.leaky_slope);
  Var<Scalar> h = crop(spectrum, Region{0, cfg.extractor_rows, 0, spectrum.dim(3)});
  ctx.note("extractor.input", h);
  for (int i = 0; i < 3; ++i) {
    const std::string p = "extractor.down" + std::to_string(i + 1);
    h = conv2d<Scalar>(h, ctx.param(p + ".weight"), std::nullopt, 2);
    h = leaky_relu(ctx.batch_norm(h, p + ".bn"), slope);
    ctx.note(p, h);
  }
  const Index batch = h.dim(0);
  h = reshape(h, {batch, h.dim(1) * h.dim(2) * h.dim(3)});
  ctx.note("extractor.flatten", h);
  const auto p = sigmoid(dense(h, ctx.param("extractor.dense.weight"), ctx.param("extractor.dense.bias")));
  ctx.note("extractor.output", p);
  return p;
}

/// Every intermediate of one embed-then-extract pass.
template <typename Scalar>
struct PipelineVars {
  ad::Var<Scalar> host_spectrum;    // X, constant
  ad::Var<Scalar> marked_stft;      // Y: patch inserted into X
  ad::Var<Scalar> marked;           // x-hat, time domain
  ad::Var<Scalar> marked_spectrum;  // X-hat = stft(x-hat)
  ad::Var<Scalar> probabilities;    // m-hat
};

/// host_spectra: [B, 2, F, T]; messages: [B, L].
template <typename Scalar>
PipelineVars<Scalar> pipeline_forward(const ForwardContext<Scalar>& ctx, const NetworkConfig& cfg,
                                      const ad::Tensor<Scalar>& host_spectra, const ad::Tensor<Scalar>& messages) {
  PipelineVars<Scalar> v;
  v.host_spectrum = ctx.tape.constant(host_spectra);
  const auto message = ctx.tape.constant(messages);
  const auto patch = embedder_forward(ctx, cfg, ad::crop(v.host_spectrum, cfg.crop), message);
  v.marked_stft = ad::insert(v.host_spectrum, patch, cfg.crop.row, cfg.crop.col);
  v.marked = ad::istft_bridge(v.marked_stft, cfg.stft);
  v.marked_spectrum = ad::stft_bridge(v.marked, cfg.stft);
  v.probabilities = extractor_forward(ctx, cfg, v.marked_spectrum);
  return v;
}

template <typename Scalar>
ad::Tensor<Scalar> message_tensor(const std::vector<BitMessage>& messages) {
  if (messages.empty()) throw UsageError("message_tensor: empty batch");
  const auto l = static_cast<Index>(messages[0].size());
  ad::Tensor<Scalar> t({static_cast<Index>(messages.size()), l});
  for (std::size_t b = 0; b < messages.size(); ++b) {
    if (static_cast<Index>(messages[b].size()) != l) throw UsageError("message_tensor: ragged batch");
    for (Index i = 0; i < l; ++i) t[static_cast<Index>(b) * l + i] = static_cast<Scalar>(messages[b][static_cast<std::size_t>(i)]);
  }
  return t;
}

/// Trained (or initialized) embedder + extractor in 32-bit precision, eval-mode API.
class WatermarkModel {
 public:
  WatermarkModel() = default;
  WatermarkModel(NetworkConfig cfg, ad::ParamStore<float> params);
  static WatermarkModel initialized(const NetworkConfig& cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }
  const ad::ParamStore<float>& params() const { return params_; }
  ad::ParamStore<float>& params() { return params_; }

  struct Embedded {
    Segment marked;
    Spectrogram marked_stft;  // Y
  };

  /// Embeds one message into one segment (eval mode).
  Embedded embed(const Segment& host, const BitMessage& message) const;
  /// Extracts probabilities from one segment (eval mode).
  SoftMessage extract(const Segment& marked) const;

  /// Batched forms over host STFTs. The watermark residual is added to the host STFT
  /// in double precision, so a zero residual reproduces the host exactly.
  std::vector<Embedded> embed_batch(const std::vector<Spectrogram>& host_spectra,
                                    const std::vector<BitMessage>& messages) const;
  std::vector<SoftMessage> extract_batch(const std::vector<Spectrogram>& spectra) const;

 private:
  void check_params() const;

  NetworkConfig config_;
  ad::ParamStore<float> params_;
};

}  // namespace nmrwm
