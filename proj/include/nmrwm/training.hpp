#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nmrwm/autodiff/adam.hpp"
#include "nmrwm/losses.hpp"
#include "nmrwm/networks.hpp"
#include "nmrwm/psychoacoustics.hpp"

namespace nmrwm {

/// A segment with its host STFT and masking patterns precomputed.
struct CorpusItem {
  Segment segment;
  Spectrogram spectrum;
  PatternGrid masking;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(const std::vector<Segment>& segments, const EarModelTables& tables);

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const CorpusItem& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<CorpusItem> items_;
};

/// Tone mixtures with on/off envelopes over band-limited noise, peak below 0.9.
std::vector<Segment> synthetic_segments(std::size_t count, std::uint64_t seed,
                                        Eigen::Index length = kSegmentLength);

/// Segments (drop-last) from WAV files; directories are scanned for *.wav, sorted.
std::vector<Segment> load_wav_segments(const std::vector<std::filesystem::path>& paths);

struct TrainingConfig {
  DistortionMode mode = DistortionMode::nmr;
  double final_alpha = 0.3;
  std::vector<double> warmup;  // alpha per initial epoch
  int max_epochs = 30;
  int patience = 2;
  int batch_size = 16;
  ad::AdamConfig adam;
  std::uint64_t seed = 1;

  /// Warmup of the given family: mse {0.5}; nmr {1e-4, 1e-2, 1e-1}.
  static TrainingConfig defaults(DistortionMode mode, double final_alpha);
  void validate() const;
};

/// Alpha applied in each epoch 1..max_epochs.
std::vector<double> alpha_schedule(const TrainingConfig& cfg);

/// Stops once the loss has failed to improve (strictly) for `patience` consecutive epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);

  /// Records one epoch's validation loss; returns true when training should stop.
  bool update(double loss);
  bool improved() const { return improved_; }
  double best() const { return best_; }

 private:
  int patience_;
  int stale_ = 0;
  bool improved_ = false;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  int epoch = 0;
  double alpha = 0.0;
  double train_loss = 0.0;
  double train_bce = 0.0;
  double val_loss = 0.0;
  double val_ber = 0.0;
  double val_snr_db = 0.0;
  double val_nmr_db = 0.0;
};

/// "epoch=3 alpha=0.1 train_loss=... val_nmr_db=..." on one line.
std::string format_log_line(const EpochRecord& r);
EpochRecord parse_log_line(const std::string& line);

struct TrainingResult {
  WatermarkModel best;
  int best_epoch = 0;
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&, const WatermarkModel&)>;

/// Runs the warmup-then-final schedule with Adam and early stopping. Early stopping and
/// checkpoint selection only consider final-alpha epochs, whose validation losses share
/// one weighting.
TrainingResult train(const TrainingConfig& cfg, const NetworkConfig& net, const Corpus& train_set,
                     const Corpus& validation_set, const EarModelTables& tables, const EpochCallback& on_epoch = {},
                     std::optional<WatermarkModel> initial = std::nullopt);

struct MetricsReport {
  double ber = 0.0;
  double snr_db = 0.0;      // mean of finite per-segment values; +inf if none are finite
  double nmr_linear = 0.0;  // mean linear NMR
  double nmr_db = 0.0;      // nmr_db(nmr_linear)
  double bce = 0.0;
  double loss = 0.0;        // with the weights passed to evaluate
  std::size_t segments = 0;
};

struct EvalOptions {
  std::uint64_t seed = 7;
  double alpha = 0.5;
  DistortionMode mode = DistortionMode::nmr;
  int batch_size = 16;
};

/// Embeds a fresh random message into every segment, extracts at the same position and
/// averages BER, SNR and NMR.
MetricsReport evaluate(const WatermarkModel& model, const Corpus& corpus, const EarModelTables& tables,
                       const EvalOptions& options = {});

/// MSE family: highest SNR. NMR family: lowest NMR among candidates whose BER does not
/// exceed `reference_ber`. Throws UsageError when nothing qualifies.
std::size_t select_model(const std::vector<MetricsReport>& candidates, DistortionMode family,
                         double reference_ber = 1.0);

}  // namespace nmrwm
