#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nmrwm/networks.hpp"
#include "nmrwm/training.hpp"

namespace nmrwm {

/// Line-based "key = value" file with [section] headers and '#' comments. Keys are stored
/// as "section.key".
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text);
  static ConfigFile load(const std::filesystem::path& path);

  /// Overrides from variables named NMWM_<SECTION>_<KEY> (upper case); only keys in
  /// `known` are considered.
  void apply_environment(const std::set<std::string>& known);
  /// Throws UsageError naming the first key that is not in `known`.
  void reject_unknown(const std::set<std::string>& known) const;

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string text(const std::string& key, const std::string& fallback) const;
  double number(const std::string& key, double fallback) const;
  long long integer(const std::string& key, long long fallback) const;
  std::vector<std::string> list(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
};

/// Everything the train command needs.
struct TrainRun {
  NetworkConfig network = NetworkConfig::desk();
  TrainingConfig training = TrainingConfig::defaults(DistortionMode::nmr, 0.3);
  std::vector<std::filesystem::path> train_paths, validation_paths, test_paths;
  std::size_t synthetic_train = 0;       // used when no train paths are given
  std::size_t synthetic_validation = 0;  // likewise for validation
  std::filesystem::path out_dir = "run";
};

const std::set<std::string>& train_config_keys();

/// Parses, applies environment overrides, rejects unknown keys and validates.
TrainRun parse_train_run(ConfigFile file);

}  // namespace nmrwm
