#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "nmrwm/config.hpp"
#include "nmrwm/error.hpp"
#include "nmrwm/model_io.hpp"
#include "nmrwm/psychoacoustics.hpp"
#include "nmrwm/selfcheck.hpp"
#include "nmrwm/training.hpp"
#include "nmrwm/wav.hpp"

namespace fs = std::filesystem;
using namespace nmrwm;

namespace {

struct Options {
  std::uint64_t seed = 1;
  bool seed_given = false;
  int threads = 1;
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index writes only its own
// output slot, so results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw DataError("no such file: " + p.string());
}

std::vector<Segment> read_segments(const fs::path& path, std::size_t* samples = nullptr) {
  require_file(path);
  const auto wav = load_wav(path);
  if (wav.samples.size() == 0) throw DataError(path.string() + " has no samples");
  if (samples) *samples = static_cast<std::size_t>(wav.samples.size());
  return segment_signal(wav.samples, PadPolicy::zero_pad_last);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int cmd_nmr(const fs::path& host_path, const fs::path& marked_path, const std::string& csv, const Options& opt) {
  std::size_t host_len = 0, marked_len = 0;
  const auto host = read_segments(host_path, &host_len);
  const auto marked = read_segments(marked_path, &marked_len);
  if (host_len != marked_len)
    throw DataError("duration mismatch: host has " + std::to_string(host_len) + " samples, marked has " +
                    std::to_string(marked_len));

  const auto tables = build_ear_tables();
  const std::size_t n = host.size();
  std::vector<double> values(n);
  std::vector<PatternGrid> pitch(n), mask(n), noise(n);
  parallel_for(n, opt.threads, [&](std::size_t i) {
    const auto hs = stft(host[i]), ms = stft(marked[i]);
    mask[i] = masking_patterns(hs, tables);
    values[i] = nmr(mask[i], hs, ms, tables);
    if (!csv.empty()) {
      pitch[i] = pitch_patterns(hs, tables);
      noise[i] = noise_patterns(hs, ms, tables);
    }
  });

  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::cout << "segment " << i << " nmr " << std::setprecision(10) << values[i] << " nmr_db "
              << fixed(nmr_db(values[i]), 3) << "\n";
    mean += values[i];
  }
  mean /= static_cast<double>(n);
  std::cout << "mean nmr " << std::setprecision(10) << mean << " nmr_db " << fixed(nmr_db(mean), 3) << "\n";

  if (!csv.empty()) {
    const Index frames = tables.stft.frames(), bands = tables.bands();
    PatternGrid p(bands, frames * static_cast<Index>(n)), m(p.rows(), p.cols()), z(p.rows(), p.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const Index at = static_cast<Index>(i) * frames;
      p.middleCols(at, frames) = pitch[i];
      m.middleCols(at, frames) = mask[i];
      z.middleCols(at, frames) = noise[i];
    }
    std::ofstream out(csv);
    if (!out) throw DataError("cannot write " + csv);
    write_pattern_csv(out, p, m, z);
  }
  return 0;
}

int cmd_embed(const fs::path& model_path, const fs::path& in, const std::string& hex, const fs::path& out,
              const Options& opt) {
  require_file(model_path);
  const auto model = load_model(model_path).model;
  const auto bits = static_cast<std::size_t>(model.config().message_bits);
  if (hex.size() * 4 != bits)
    throw UsageError("message must have " + std::to_string(bits / 4) + " hex digits, got " + std::to_string(hex.size()));
  const auto message = BitMessage::from_hex(hex);
  std::size_t samples = 0;
  const auto segments = read_segments(in, &samples);

  std::vector<Segment> marked(segments.size());
  parallel_for(segments.size(), opt.threads, [&](std::size_t i) { marked[i] = model.embed(segments[i], message).marked; });
  Eigen::VectorXd joined(static_cast<Index>(samples));
  for (std::size_t i = 0; i < marked.size(); ++i) {
    const Index at = static_cast<Index>(i) * kSegmentLength;
    const Index len = std::min(kSegmentLength, static_cast<Index>(samples) - at);
    joined.segment(at, len) = marked[i].samples.head(len);
  }
  save_wav(out, joined);
  std::cout << "embedded " << segments.size() << " segment(s) into " << out.string() << "\n";
  return 0;
}

int cmd_extract(const fs::path& model_path, const fs::path& in, const Options& opt) {
  require_file(model_path);
  const auto model = load_model(model_path).model;
  const auto segments = read_segments(in);
  std::vector<SoftMessage> soft(segments.size());
  parallel_for(segments.size(), opt.threads, [&](std::size_t i) { soft[i] = model.extract(segments[i]); });
  SoftMessage mean = SoftMessage::Zero(model.config().message_bits);
  for (const auto& s : soft) mean += s;
  mean /= static_cast<double>(soft.size());
  const double confidence = 2.0 * (mean.array() - 0.5).abs().mean();
  std::cout << "message " << round_message(mean).to_hex() << "\n";
  std::cout << "confidence " << fixed(confidence, 6) << "\n";
  return 0;
}

Corpus corpus_from(const std::vector<fs::path>& paths, std::size_t synthetic, std::uint64_t seed,
                   const EarModelTables& tables, const char* what) {
  auto segments = paths.empty() ? synthetic_segments(synthetic, seed) : load_wav_segments(paths);
  if (segments.empty()) throw DataError(std::string("no ") + what + " segments found");
  return Corpus(segments, tables);
}

void print_table_header() { std::cout << std::left << std::setw(24) << "model" << " BER       SNR_dB    NMR_dB\n"; }

void print_table_row(const std::string& name, const MetricsReport& r) {
  std::cout << std::left << std::setw(24) << name << " " << std::setw(9) << fixed(r.ber, 5) << " " << std::setw(9)
            << fixed(r.snr_db, 2) << " " << fixed(r.nmr_db, 2) << "\n";
}

int cmd_train(const fs::path& config_path, const Options& opt) {
  auto run = parse_train_run(ConfigFile::load(config_path));
  if (opt.seed_given) run.training.seed = opt.seed;
  for (const auto* list : {&run.train_paths, &run.validation_paths, &run.test_paths})
    for (const auto& p : *list)
      if (!fs::exists(p)) throw DataError("corpus path does not exist: " + p.string());

  const auto tables = build_ear_tables();
  const auto train_set = corpus_from(run.train_paths, run.synthetic_train, run.training.seed, tables, "training");
  const auto val_set =
      corpus_from(run.validation_paths, run.synthetic_validation, run.training.seed + 1000003, tables, "validation");
  fs::create_directories(run.out_dir);
  std::ofstream log(run.out_dir / "train.log");
  if (!log) throw DataError("cannot write to " + run.out_dir.string());

  const std::string mode = run.training.mode == DistortionMode::nmr ? "nmr" : "mse";
  auto provenance = [&](int epoch) {
    return std::map<std::string, std::string>{{"mode", mode},
                                              {"final_alpha", std::to_string(run.training.final_alpha)},
                                              {"seed", std::to_string(run.training.seed)},
                                              {"epoch", std::to_string(epoch)}};
  };
  const auto result = train(run.training, run.network, train_set, val_set, tables,
                            [&](const EpochRecord& r, const WatermarkModel& m) {
                              const auto line = format_log_line(r);
                              log << line << "\n" << std::flush;
                              std::cout << line << "\n" << std::flush;
                              std::ostringstream name;
                              name << "epoch_" << std::setw(2) << std::setfill('0') << r.epoch << ".nmwm";
                              save_model(run.out_dir / name.str(), m, provenance(r.epoch));
                            });
  save_model(run.out_dir / "best.nmwm", result.best, provenance(result.best_epoch));
  std::cout << "best epoch " << result.best_epoch << " -> " << (run.out_dir / "best.nmwm").string() << "\n";

  if (!run.test_paths.empty()) {
    const Corpus test_set(load_wav_segments(run.test_paths), tables);
    if (test_set.empty()) throw DataError("no test segments found");
    EvalOptions eo;
    eo.seed = run.training.seed;
    eo.alpha = run.training.final_alpha;
    eo.mode = run.training.mode;
    print_table_header();
    print_table_row("best.nmwm", evaluate(result.best, test_set, tables, eo));
  }
  return 0;
}

int cmd_eval(const std::vector<fs::path>& models, const std::vector<fs::path>& dataset, std::size_t synthetic,
             const Options& opt) {
  for (const auto& m : models) require_file(m);
  if (dataset.empty() && synthetic == 0) throw UsageError("eval needs --dataset or --synthetic");
  const auto tables = build_ear_tables();
  const auto corpus = corpus_from(dataset, synthetic, opt.seed, tables, "evaluation");
  print_table_header();
  for (const auto& path : models) {
    const auto file = load_model(path);
    EvalOptions eo;
    eo.seed = opt.seed;
    print_table_row(path.filename().string(), evaluate(file.model, corpus, tables, eo));
  }
  return 0;
}

int cmd_selfcheck(const Options& opt) {
  bool ok = true;
  for (const auto& c : run_selfcheck(opt.seed)) {
    std::cout << (c.passed ? "ok   " : "FAIL ") << c.name << ": " << c.detail << "\n";
    ok = ok && c.passed;
  }
  std::cout << (ok ? "selfcheck passed" : "selfcheck FAILED") << "\n";
  return ok ? 0 : static_cast<int>(ErrorKind::numeric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NMR-loss audio watermarking toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  auto* seed = app.add_option("--seed", opt.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", opt.threads, "Worker threads for per-segment work")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  std::string host, marked, csv, model, in, out, message, config;
  std::vector<std::string> models, dataset;
  std::size_t synthetic = 0;

  auto* nmr_cmd = app.add_subcommand("nmr", "Noise-to-mask ratio of a marked file against its host");
  nmr_cmd->add_option("--host", host)->required();
  nmr_cmd->add_option("--marked", marked)->required();
  nmr_cmd->add_option("--csv", csv, "Write pitch/mask/noise patterns");

  auto* embed_cmd = app.add_subcommand("embed", "Embed a hex message in every segment");
  embed_cmd->add_option("--model", model)->required();
  embed_cmd->add_option("--in", in)->required();
  embed_cmd->add_option("--message", message)->required();
  embed_cmd->add_option("--out", out)->required();

  auto* extract_cmd = app.add_subcommand("extract", "Extract the message averaged over segments");
  extract_cmd->add_option("--model", model)->required();
  extract_cmd->add_option("--in", in)->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", config)->required();

  auto* eval_cmd = app.add_subcommand("eval", "BER, SNR and NMR of models on a dataset");
  eval_cmd->add_option("--model", models)->required();
  eval_cmd->add_option("--dataset", dataset, "WAV files or directories");
  eval_cmd->add_option("--synthetic", synthetic, "Use this many generated segments instead");

  auto* selfcheck_cmd = app.add_subcommand("selfcheck", "Gradient, reconstruction and null-model checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::usage);
  }
  opt.seed_given = seed->count() > 0;

  try {
    if (nmr_cmd->parsed()) return cmd_nmr(host, marked, csv, opt);
    if (embed_cmd->parsed()) return cmd_embed(model, in, message, out, opt);
    if (extract_cmd->parsed()) return cmd_extract(model, in, opt);
    if (train_cmd->parsed()) return cmd_train(config, opt);
    if (eval_cmd->parsed())
      return cmd_eval({models.begin(), models.end()}, {dataset.begin(), dataset.end()}, synthetic, opt);
    if (selfcheck_cmd->parsed()) return cmd_selfcheck(opt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::data);
  }
  return static_cast<int>(ErrorKind::usage);
}
