#include "nmrwm/networks.hpp"

#include <sstream>

namespace nmrwm {
namespace {

std::string dims(const ad::Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

void add_bn(std::vector<LayerShape>& out, const std::string& prefix, Index channels) {
  out.push_back({prefix + ".gamma", {channels}, true});
  out.push_back({prefix + ".beta", {channels}, true});
  out.push_back({prefix + ".running_mean", {channels}, false});
  out.push_back({prefix + ".running_var", {channels}, false});
}

}  // namespace

NetworkConfig NetworkConfig::full(int message_bits) {
  NetworkConfig cfg;
  cfg.message_bits = message_bits;
  return cfg;
}

NetworkConfig NetworkConfig::desk() {
  NetworkConfig cfg;
  cfg.message_bits = 64;
  cfg.encoder_channels = {8, 16, 32, 64};
  cfg.extractor_channels = {8, 16, 32};
  return cfg;
}

void NetworkConfig::validate() const {
  stft.validate();
  if (message_bits <= 0) throw UsageError("message_bits must be positive");
  for (auto c : encoder_channels)
    if (c <= 0) throw UsageError("encoder channels must be positive");
  for (auto c : extractor_channels)
    if (c <= 0) throw UsageError("extractor channels must be positive");
  if (top_channels <= 0) throw UsageError("top channel count must be positive");
  if (crop.rows % 16 != 0 || crop.cols % 16 != 0 || crop.rows <= 0 || crop.cols <= 0)
    throw UsageError("embedder crop must be a positive multiple of 16 in both axes");
  if (crop.row < 0 || crop.col < 0 || crop.row + crop.rows > stft.bins() || crop.col + crop.cols > stft.frames())
    throw UsageError("embedder crop lies outside the spectrogram");
  if (extractor_rows <= 0 || extractor_rows > stft.bins()) throw UsageError("extractor rows out of range");
}

std::vector<LayerShape> parameter_manifest(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<LayerShape> out;
  const auto& enc = cfg.encoder_channels;
  Index in = 2;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "embedder.down" + std::to_string(i + 1);
    out.push_back({p + ".weight", {enc[i], in, 5, 5}, true});
    add_bn(out, p + ".bn", enc[i]);
    in = enc[i];
  }
  out.push_back({"embedder.embed.weight", {enc[3], enc[3] + cfg.message_bits, 5, 5}, true});
  out.push_back({"embedder.embed.bias", {enc[3]}, true});
  // Upsampling unit i takes [skip_i, below] (2 * enc[i] channels) and restores the
  // channel count of the matching downsampling input; the topmost emits top_channels.
  for (int i = 3; i >= 0; --i) {
    const std::string p = "embedder.up" + std::to_string(i + 1);
    const Index cout = i > 0 ? enc[static_cast<std::size_t>(i - 1)] : cfg.top_channels;
    out.push_back({p + ".weight", {2 * enc[static_cast<std::size_t>(i)], cout, 5, 5}, true});
    add_bn(out, p + ".bn", cout);
  }
  out.push_back({"embedder.out.weight", {2, cfg.top_channels + 2, 5, 5}, true});
  out.push_back({"embedder.out.bias", {2}, true});

  in = 2;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "extractor.down" + std::to_string(i + 1);
    out.push_back({p + ".weight", {cfg.extractor_channels[i], in, 5, 5}, true});
    add_bn(out, p + ".bn", cfg.extractor_channels[i]);
    in = cfg.extractor_channels[i];
  }
  const Index flat = in * cfg.extractor_out_rows() * cfg.extractor_out_cols();
  out.push_back({"extractor.dense.weight", {cfg.message_bits, flat}, true});
  out.push_back({"extractor.dense.bias", {cfg.message_bits}, true});
  return out;
}

std::string manifest_text(const NetworkConfig& cfg) {
  std::ostringstream os;
  Index trainable = 0, buffers = 0;
  for (const auto& l : parameter_manifest(cfg)) {
    os << l.name << ' ' << dims(l.shape) << (l.trainable ? "" : " buffer") << '\n';
    (l.trainable ? trainable : buffers) += ad::element_count(l.shape);
  }
  os << "total trainable=" << trainable << " buffers=" << buffers << '\n';
  return os.str();
}

std::string shape_trace(const NetworkConfig& cfg) {
  const auto params = init_parameters<float>(cfg, 0);
  ad::Tape<float> tape;
  std::vector<std::pair<std::string, ad::Shape>> trace;
  ForwardContext<float> ctx{tape, params, ad::Mode::eval, nullptr, nullptr, &trace};
  const ad::Tensor<float> spectra({1, 2, cfg.stft.bins(), cfg.stft.frames()});
  const ad::Tensor<float> messages({1, cfg.message_bits});
  pipeline_forward(ctx, cfg, spectra, messages);
  std::ostringstream os;
  for (const auto& [stage, shape] : trace) {
    ad::Shape s(shape.begin() + 1, shape.end());  // drop the batch axis
    os << stage << ' ' << dims(s) << '\n';
  }
  return os.str();
}

WatermarkModel::WatermarkModel(NetworkConfig cfg, ad::ParamStore<float> params)
    : config_(std::move(cfg)), params_(std::move(params)) {
  check_params();
}

WatermarkModel WatermarkModel::initialized(const NetworkConfig& cfg, std::uint64_t seed) {
  return WatermarkModel(cfg, init_parameters<float>(cfg, seed));
}

void WatermarkModel::check_params() const {
  const auto manifest = parameter_manifest(config_);
  if (manifest.size() != params_.size())
    throw UsageError("parameter store has " + std::to_string(params_.size()) + " entries, topology expects " +
                     std::to_string(manifest.size()));
  for (const auto& l : manifest) {
    if (!params_.contains(l.name)) throw UsageError("missing parameter " + l.name);
    if (params_.at(l.name).value.shape() != l.shape)
      throw UsageError("parameter " + l.name + " has shape " + ad::shape_string(params_.at(l.name).value.shape()) +
                       ", topology expects " + ad::shape_string(l.shape));
  }
}

WatermarkModel::Embedded WatermarkModel::embed(const Segment& host, const BitMessage& message) const {
  return std::move(embed_batch({stft(host, config_.stft)}, {message}).front());
}

SoftMessage WatermarkModel::extract(const Segment& marked) const {
  return std::move(extract_batch({stft(marked, config_.stft)}).front());
}

std::vector<WatermarkModel::Embedded> WatermarkModel::embed_batch(const std::vector<Spectrogram>& host_spectra,
                                                                  const std::vector<BitMessage>& messages) const {
  if (host_spectra.size() != messages.size()) throw UsageError("embed_batch: spectra and messages differ in count");
  for (const auto& m : messages)
    if (static_cast<int>(m.size()) != config_.message_bits)
      throw UsageError("message has " + std::to_string(m.size()) + " bits, model expects " +
                       std::to_string(config_.message_bits));
  ad::Tape<float> tape;
  const ForwardContext<float> ctx{tape, params_};
  const auto spectrum = tape.constant(ad::spectrogram_tensor<float>(host_spectra));
  const auto host_crop = ad::crop(spectrum, config_.crop);
  const auto patch = embedder_forward(ctx, config_, host_crop, tape.constant(message_tensor<float>(messages)));

  const auto& c = config_.crop;
  std::vector<Embedded> out;
  out.reserve(host_spectra.size());
  for (std::size_t b = 0; b < host_spectra.size(); ++b) {
    const Spectrogram hi = ad::to_spectrogram(patch.value(), static_cast<Index>(b));
    const Spectrogram lo = ad::to_spectrogram(host_crop.value(), static_cast<Index>(b));
    Spectrogram full = host_spectra[b];
    full.re.block(c.row, c.col, c.rows, c.cols) += hi.re - lo.re;
    full.im.block(c.row, c.col, c.rows, c.cols) += hi.im - lo.im;
    Embedded e;
    e.marked = Segment(istft(full, config_.stft));
    e.marked_stft = std::move(full);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<SoftMessage> WatermarkModel::extract_batch(const std::vector<Spectrogram>& spectra) const {
  ad::Tape<float> tape;
  const ForwardContext<float> ctx{tape, params_};
  const auto p = extractor_forward(ctx, config_, tape.constant(ad::spectrogram_tensor<float>(spectra)));
  const Index l = config_.message_bits;
  std::vector<SoftMessage> out;
  for (std::size_t b = 0; b < spectra.size(); ++b)
    out.push_back(p.value().array().segment(static_cast<Index>(b) * l, l).cast<double>().matrix());
  return out;
}

}  // namespace nmrwm
