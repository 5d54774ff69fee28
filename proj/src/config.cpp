#include "nmrwm/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "nmrwm/error.hpp"

namespace nmrwm {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string env_name(const std::string& key) {
  std::string out = "NMWM_";
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line, section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = " (line " + std::to_string(number) + ")";
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError("config: unterminated section header" + where);
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw UsageError("config: empty section name" + where);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config: expected key = value" + where);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError("config: missing key" + where);
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.values_.count(full)) throw UsageError("config: duplicate key " + full + where);
    cfg.values_[full] = trim(line.substr(eq + 1));
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str());
}

void ConfigFile::apply_environment(const std::set<std::string>& known) {
  for (const auto& key : known)
    if (const char* v = std::getenv(env_name(key).c_str())) values_[key] = trim(v);
}

void ConfigFile::reject_unknown(const std::set<std::string>& known) const {
  for (const auto& [key, value] : values_)
    if (!known.count(key)) throw UsageError("config: unknown key " + key);
}

std::optional<std::string> ConfigFile::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string ConfigFile::text(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double ConfigFile::number(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used == v->size()) return d;
  } catch (const std::exception&) {
  }
  throw UsageError("config: " + key + " is not a number: " + *v);
}

long long ConfigFile::integer(const std::string& key, long long fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const long long i = std::stoll(*v, &used);
    if (used == v->size()) return i;
  } catch (const std::exception&) {
  }
  throw UsageError("config: " + key + " is not an integer: " + *v);
}

std::vector<std::string> ConfigFile::list(const std::string& key) const {
  std::vector<std::string> out;
  const auto v = get(key);
  if (!v) return out;
  std::istringstream in(*v);
  std::string item;
  while (std::getline(in, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys{
      "run.seed",           "run.out_dir",          "network.preset",         "network.message_bits",
      "training.mode",      "training.final_alpha", "training.warmup",        "training.max_epochs",
      "training.patience",  "training.batch_size",  "training.lr",            "data.train",
      "data.validation",    "data.test",            "data.synthetic_train",   "data.synthetic_validation"};
  return keys;
}

TrainRun parse_train_run(ConfigFile file) {
  file.apply_environment(train_config_keys());
  file.reject_unknown(train_config_keys());
  TrainRun run;

  const auto preset = file.text("network.preset", "desk");
  const int bits = static_cast<int>(file.integer("network.message_bits", preset == "desk" ? 64 : 256));
  if (preset == "desk") {
    run.network = NetworkConfig::desk();
    run.network.message_bits = bits;
  } else if (preset == "full") {
    run.network = NetworkConfig::full(bits);
  } else {
    throw UsageError("config: network.preset must be desk or full");
  }
  run.network.validate();

  const auto mode_name = file.text("training.mode", "nmr");
  DistortionMode mode;
  if (mode_name == "nmr")
    mode = DistortionMode::nmr;
  else if (mode_name == "mse")
    mode = DistortionMode::mse;
  else
    throw UsageError("config: training.mode must be nmr or mse");
  run.training = TrainingConfig::defaults(mode, file.number("training.final_alpha", mode == DistortionMode::nmr ? 0.3 : 0.95));
  if (file.has("training.warmup")) {
    run.training.warmup.clear();
    for (const auto& a : file.list("training.warmup")) {
      ConfigFile one;
      one.set("a", a);
      run.training.warmup.push_back(one.number("a", 0.0));
    }
  }
  run.training.max_epochs = static_cast<int>(file.integer("training.max_epochs", run.training.max_epochs));
  run.training.patience = static_cast<int>(file.integer("training.patience", run.training.patience));
  run.training.batch_size = static_cast<int>(file.integer("training.batch_size", run.training.batch_size));
  run.training.adam.lr = file.number("training.lr", run.training.adam.lr);
  const auto seed = file.integer("run.seed", 1);
  if (seed < 0) throw UsageError("config: run.seed must be non-negative");
  run.training.seed = static_cast<std::uint64_t>(seed);
  run.training.validate();

  for (const auto& p : file.list("data.train")) run.train_paths.emplace_back(p);
  for (const auto& p : file.list("data.validation")) run.validation_paths.emplace_back(p);
  for (const auto& p : file.list("data.test")) run.test_paths.emplace_back(p);
  const auto syn_train = file.integer("data.synthetic_train", 0);
  const auto syn_val = file.integer("data.synthetic_validation", 0);
  if (syn_train < 0 || syn_val < 0) throw UsageError("config: synthetic counts must be non-negative");
  run.synthetic_train = static_cast<std::size_t>(syn_train);
  run.synthetic_validation = static_cast<std::size_t>(syn_val);
  if (run.train_paths.empty() && run.synthetic_train == 0)
    throw UsageError("config: no training data (data.train or data.synthetic_train)");
  if (run.validation_paths.empty() && run.synthetic_validation == 0)
    throw UsageError("config: no validation data (data.validation or data.synthetic_validation)");
  run.out_dir = file.text("run.out_dir", "run");
  return run;
}

}  // namespace nmrwm
