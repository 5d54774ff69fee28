#include "nmrwm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <unsupported/Eigen/FFT>

#include "nmrwm/error.hpp"
#include "nmrwm/wav.hpp"

namespace nmrwm {
namespace {

using Index = Eigen::Index;

// Independent stream per (seed, purpose, epoch).
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(epoch)};
  return std::mt19937_64(seq);
}

Eigen::VectorXd band_limited_noise(Index length, double lo_hz, double hi_hz, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  Eigen::VectorXd white(length);
  for (Index i = 0; i < length; ++i) white(i) = gauss(rng);
  Eigen::FFT<double> fft;
  Eigen::VectorXcd spec;
  fft.fwd(spec, white);
  const double bin_hz = static_cast<double>(kSampleRate) / static_cast<double>(length);
  for (Index k = 0; k < spec.size(); ++k) {
    const double hz = static_cast<double>(std::min(k, length - k)) * bin_hz;
    if (hz < lo_hz || hz > hi_hz) spec(k) = 0.0;
  }
  Eigen::VectorXd out;
  fft.inv(out, spec);
  const double rms = std::sqrt(out.squaredNorm() / static_cast<double>(length));
  return rms > 0.0 ? Eigen::VectorXd(out / rms) : out;
}

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
};

// Consecutive batches over a permutation; a trailing batch of one joins the previous one
// so batch normalization always sees at least two items.
BatchPlan plan_batches(std::vector<std::size_t> order, int batch_size) {
  BatchPlan plan;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < order.size(); i += bs)
    plan.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                              order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + bs)));
  if (plan.batches.size() > 1 && plan.batches.back().size() == 1) {
    plan.batches[plan.batches.size() - 2].push_back(plan.batches.back().front());
    plan.batches.pop_back();
  }
  return plan;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

double parse_double(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

}  // namespace

Corpus::Corpus(const std::vector<Segment>& segments, const EarModelTables& tables) {
  items_.reserve(segments.size());
  for (const auto& s : segments) {
    CorpusItem item;
    item.segment = s;
    item.spectrum = stft(s, tables.stft);
    item.masking = masking_patterns(item.spectrum, tables);
    items_.push_back(std::move(item));
  }
}

std::vector<Segment> synthetic_segments(std::size_t count, std::uint64_t seed, Index length) {
  std::vector<Segment> out;
  out.reserve(count);
  auto rng = stream(seed, 0x5e9, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t s = 0; s < count; ++s) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(length);
    const int tones = 1 + static_cast<int>(u(rng) * 4.0);
    for (int k = 0; k < tones; ++k) {
      const double hz = 100.0 * std::pow(50.0, u(rng));  // 100 Hz .. 5 kHz, log-uniform
      const double amp = 0.05 + 0.2 * u(rng);
      const double phase = 2.0 * std::numbers::pi * u(rng);
      const Index on = static_cast<Index>(u(rng) * 0.5 * static_cast<double>(length));
      const Index off = on + static_cast<Index>((0.3 + 0.7 * u(rng)) * static_cast<double>(length - on));
      for (Index i = on; i < std::min(off, length); ++i) {
        const double ramp = std::min({1.0, static_cast<double>(i - on) / 441.0, static_cast<double>(off - i) / 441.0});
        x(i) += ramp * amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / kSampleRate + phase);
      }
    }
    const double lo = 50.0 + 500.0 * u(rng);
    const double hi = lo + 2000.0 + 14000.0 * u(rng);
    x += (0.01 + 0.05 * u(rng)) * band_limited_noise(length, lo, hi, rng);
    const double peak = x.cwiseAbs().maxCoeff();
    if (peak > 0.9) x *= 0.9 / peak;
    out.emplace_back(std::move(x));
  }
  return out;
}

std::vector<Segment> load_wav_segments(const std::vector<std::filesystem::path>& paths) {
  std::vector<std::filesystem::path> files;
  for (const auto& p : paths) {
    if (std::filesystem::is_directory(p)) {
      std::vector<std::filesystem::path> found;
      for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file() && (e.path().extension() == ".wav" || e.path().extension() == ".WAV"))
          found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (std::filesystem::exists(p)) {
      files.push_back(p);
    } else {
      throw DataError("corpus path does not exist: " + p.string());
    }
  }
  std::vector<Segment> out;
  for (const auto& f : files) {
    auto segs = segment_signal(load_wav(f).samples, PadPolicy::drop_last);
    out.insert(out.end(), std::make_move_iterator(segs.begin()), std::make_move_iterator(segs.end()));
  }
  return out;
}

TrainingConfig TrainingConfig::defaults(DistortionMode mode, double final_alpha) {
  TrainingConfig cfg;
  cfg.mode = mode;
  cfg.final_alpha = final_alpha;
  cfg.warmup = mode == DistortionMode::mse ? std::vector<double>{0.5} : std::vector<double>{1e-4, 1e-2, 1e-1};
  return cfg;
}

void TrainingConfig::validate() const {
  LossWeights{final_alpha};
  for (double a : warmup) LossWeights{a};
  if (max_epochs < 1) throw UsageError("max_epochs must be at least 1");
  if (patience < 1) throw UsageError("patience must be at least 1");
  if (batch_size < 2) throw UsageError("batch_size must be at least 2");
  if (!(adam.lr > 0.0)) throw UsageError("learning rate must be positive");
}

std::vector<double> alpha_schedule(const TrainingConfig& cfg) {
  std::vector<double> out;
  for (int e = 0; e < cfg.max_epochs; ++e)
    out.push_back(static_cast<std::size_t>(e) < cfg.warmup.size() ? cfg.warmup[static_cast<std::size_t>(e)]
                                                                  : cfg.final_alpha);
  return out;
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience) {
  if (patience < 1) throw UsageError("patience must be at least 1");
}

bool EarlyStopping::update(double loss) {
  improved_ = loss < best_;
  if (improved_) {
    best_ = loss;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return stale_ >= patience_;
}

std::string format_log_line(const EpochRecord& r) {
  return "epoch=" + std::to_string(r.epoch) + " alpha=" + fmt(r.alpha) + " train_loss=" + fmt(r.train_loss) +
         " train_bce=" + fmt(r.train_bce) + " val_loss=" + fmt(r.val_loss) + " val_ber=" + fmt(r.val_ber) +
         " val_snr_db=" + fmt(r.val_snr_db) + " val_nmr_db=" + fmt(r.val_nmr_db);
}

EpochRecord parse_log_line(const std::string& line) {
  EpochRecord r;
  std::istringstream is(line);
  std::string tok;
  int seen = 0;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw DataError("training log: malformed field " + tok);
    const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
    try {
      if (key == "epoch")
        r.epoch = std::stoi(value);
      else if (key == "alpha")
        r.alpha = parse_double(value);
      else if (key == "train_loss")
        r.train_loss = parse_double(value);
      else if (key == "train_bce")
        r.train_bce = parse_double(value);
      else if (key == "val_loss")
        r.val_loss = parse_double(value);
      else if (key == "val_ber")
        r.val_ber = parse_double(value);
      else if (key == "val_snr_db")
        r.val_snr_db = parse_double(value);
      else if (key == "val_nmr_db")
        r.val_nmr_db = parse_double(value);
      else
        throw DataError("training log: unknown field " + key);
    } catch (const std::invalid_argument&) {
      throw DataError("training log: bad value in " + tok);
    }
    ++seen;
  }
  if (seen != 8) throw DataError("training log: expected 8 fields, got " + std::to_string(seen));
  return r;
}

TrainingResult train(const TrainingConfig& cfg, const NetworkConfig& net, const Corpus& train_set,
                     const Corpus& validation_set, const EarModelTables& tables, const EpochCallback& on_epoch,
                     std::optional<WatermarkModel> initial) {
  cfg.validate();
  net.validate();
  if (train_set.size() < 2) throw UsageError("training corpus needs at least two segments");
  if (validation_set.empty()) throw UsageError("validation corpus is empty");

  WatermarkModel model = initial ? std::move(*initial) : WatermarkModel::initialized(net, cfg.seed);
  if (!(model.config() == net)) throw UsageError("initial model topology differs from the network config");
  auto& params = model.params();

  const auto schedule = alpha_schedule(cfg);
  const auto bits = static_cast<std::size_t>(net.message_bits);
  auto rng = stream(cfg.seed, 1, 0);
  TrainingResult result;
  result.best = model;
  EarlyStopping stopper(cfg.patience);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double alpha = schedule[static_cast<std::size_t>(epoch - 1)];
    const LossWeights weights(alpha);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.alpha = alpha;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, bce_sum = 0.0;
    for (const auto& batch : plan_batches(order, cfg.batch_size).batches) {
      std::vector<Spectrogram> specs;
      std::vector<BitMessage> messages;
      for (auto i : batch) {
        specs.push_back(train_set[i].spectrum);
        messages.push_back(BitMessage::random(bits, rng));
      }
      ad::Tape<float> tape;
      const ForwardContext<float> ctx{tape, params, ad::Mode::train, &rng, &params};
      const auto v = pipeline_forward(ctx, net, ad::spectrogram_tensor<float>(specs), message_tensor<float>(messages));

      const auto n = static_cast<double>(batch.size());
      ad::Tensor<float> grad_spec(v.marked_spectrum.shape());
      ad::Tensor<float> grad_prob(v.probabilities.shape());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto bi = static_cast<Index>(b);
        const auto& item = train_set[batch[b]];
        const Spectrogram marked = ad::to_spectrogram(v.marked_spectrum.value(), bi);
        const SoftMessage predicted =
            v.probabilities.value().array().segment(bi * net.message_bits, net.message_bits).cast<double>().matrix();
        LossResult r = combined_loss(item.spectrum, marked, predicted, messages[b], weights, cfg.mode, tables, &item.masking);
        loss_sum += r.value;
        bce_sum += r.message;
        r.marked_grad.re /= n;
        r.marked_grad.im /= n;
        ad::write_spectrogram(r.marked_grad, grad_spec, bi);
        grad_prob.array().segment(bi * net.message_bits, net.message_bits) = (r.predicted_grad / n).array().cast<float>();
      }
      if (!std::isfinite(loss_sum))
        throw NumericError("non-finite training loss in epoch " + std::to_string(epoch));

      const auto surrogate = ad::add(ad::dot(v.marked_spectrum, grad_spec), ad::dot(v.probabilities, grad_prob));
      tape.backward(surrogate);
      params.zero_grad();
      tape.collect_gradients(params);
      ad::adam_step(params, cfg.adam);
    }
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_bce = bce_sum / static_cast<double>(train_set.size());

    EvalOptions eo;
    eo.seed = cfg.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch));
    eo.alpha = alpha;
    eo.mode = cfg.mode;
    eo.batch_size = cfg.batch_size;
    const MetricsReport val = evaluate(model, validation_set, tables, eo);
    if (!std::isfinite(val.loss)) throw NumericError("non-finite validation loss in epoch " + std::to_string(epoch));
    rec.val_loss = val.loss;
    rec.val_ber = val.ber;
    rec.val_snr_db = val.snr_db;
    rec.val_nmr_db = val.nmr_db;
    result.log.push_back(rec);

    bool stop = false;
    if (static_cast<std::size_t>(epoch) > cfg.warmup.size()) {
      stop = stopper.update(rec.val_loss);
      if (stopper.improved()) {
        result.best = model;
        result.best_epoch = epoch;
      }
    } else if (static_cast<std::size_t>(epoch) == cfg.warmup.size() || cfg.max_epochs == epoch) {
      // Fallback checkpoint if no final-alpha epoch runs.
      result.best = model;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec, model);
    if (stop) break;
  }
  return result;
}

MetricsReport evaluate(const WatermarkModel& model, const Corpus& corpus, const EarModelTables& tables,
                       const EvalOptions& options) {
  if (corpus.empty()) throw UsageError("evaluation corpus is empty");
  const LossWeights weights(options.alpha);
  auto rng = stream(options.seed, 2, 0);
  const auto bits = static_cast<std::size_t>(model.config().message_bits);
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch_size));

  MetricsReport rep;
  double snr_sum = 0.0;
  std::size_t snr_count = 0;
  for (std::size_t start = 0; start < corpus.size(); start += bs) {
    const std::size_t stop = std::min(corpus.size(), start + bs);
    std::vector<Spectrogram> specs;
    std::vector<BitMessage> messages;
    for (std::size_t i = start; i < stop; ++i) {
      specs.push_back(corpus[i].spectrum);
      messages.push_back(BitMessage::random(bits, rng));
    }
    const auto embedded = model.embed_batch(specs, messages);
    std::vector<Spectrogram> marked_specs;
    for (const auto& e : embedded) marked_specs.push_back(stft(e.marked, model.config().stft));
    const auto soft = model.extract_batch(marked_specs);
    for (std::size_t b = 0; b < specs.size(); ++b) {
      const auto& item = corpus[start + b];
      rep.ber += ber(round_message(soft[b]), messages[b]);
      const double snr = snr_db(item.segment.samples, embedded[b].marked.samples);
      if (std::isfinite(snr)) {
        snr_sum += snr;
        ++snr_count;
      }
      const LossResult r = combined_loss(item.spectrum, marked_specs[b], soft[b], messages[b], weights, options.mode,
                                         tables, &item.masking);
      rep.nmr_linear += options.mode == DistortionMode::nmr ? r.distortion : nmr(item.masking, item.spectrum, marked_specs[b], tables);
      rep.bce += r.message;
      rep.loss += r.value;
    }
  }
  const auto n = static_cast<double>(corpus.size());
  rep.segments = corpus.size();
  rep.ber /= n;
  rep.nmr_linear /= n;
  rep.bce /= n;
  rep.loss /= n;
  rep.nmr_db = nmr_db(rep.nmr_linear);
  rep.snr_db = snr_count ? snr_sum / static_cast<double>(snr_count) : std::numeric_limits<double>::infinity();
  return rep;
}

std::size_t select_model(const std::vector<MetricsReport>& candidates, DistortionMode family, double reference_ber) {
  if (candidates.empty()) throw UsageError("select_model: no candidates");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (family == DistortionMode::mse) {
      if (!best || c.snr_db > candidates[*best].snr_db) best = i;
    } else if (c.ber <= reference_ber) {
      if (!best || c.nmr_linear < candidates[*best].nmr_linear) best = i;
    }
  }
  if (!best) throw UsageError("select_model: no candidate has BER <= " + fmt(reference_ber));
  return *best;
}

}  // namespace nmrwm
