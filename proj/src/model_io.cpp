#include "nmrwm/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include <zlib.h>

#include "nmrwm/error.hpp"

namespace nmrwm {
namespace {

constexpr char kMagic[4] = {'N', 'M', 'W', 'M'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::string source) : buf_(buf), source_(std::move(source)) {}

  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw DataError(source_ + ": truncated model file");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint16_t u16() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(2));
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return buf_.size(); }

 private:
  const std::vector<char>& buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(const char* p, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

template <std::size_t N>
std::string join(const std::array<Index, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

std::vector<long long> split_ints(const std::string& s, const std::string& key) {
  std::vector<long long> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw DataError("model header: bad integer list for " + key + ": " + s);
    }
  }
  return out;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError("model header: missing key " + key);
  return it->second;
}

std::vector<long long> ints(const std::map<std::string, std::string>& kv, const std::string& key, std::size_t count) {
  auto v = split_ints(need(kv, key), key);
  if (v.size() != count) throw DataError("model header: " + key + " needs " + std::to_string(count) + " values");
  return v;
}

}  // namespace

std::string network_header(const NetworkConfig& cfg) {
  std::ostringstream os;
  os << "message_bits=" << cfg.message_bits << '\n'
     << "encoder_channels=" << join(cfg.encoder_channels) << '\n'
     << "extractor_channels=" << join(cfg.extractor_channels) << '\n'
     << "top_channels=" << cfg.top_channels << '\n'
     << "crop=" << cfg.crop.row << ',' << cfg.crop.rows << ',' << cfg.crop.col << ',' << cfg.crop.cols << '\n'
     << "extractor_rows=" << cfg.extractor_rows << '\n'
     << "stft=" << cfg.stft.dft_length << ',' << cfg.stft.hop << ',' << (cfg.stft.centered ? 1 : 0) << ','
     << cfg.stft.segment_length << '\n';
  return os.str();
}

NetworkConfig parse_network_header(const std::map<std::string, std::string>& kv) {
  NetworkConfig cfg;
  cfg.message_bits = static_cast<int>(ints(kv, "message_bits", 1)[0]);
  const auto enc = ints(kv, "encoder_channels", 4);
  for (std::size_t i = 0; i < 4; ++i) cfg.encoder_channels[i] = enc[i];
  const auto ext = ints(kv, "extractor_channels", 3);
  for (std::size_t i = 0; i < 3; ++i) cfg.extractor_channels[i] = ext[i];
  cfg.top_channels = ints(kv, "top_channels", 1)[0];
  const auto crop = ints(kv, "crop", 4);
  cfg.crop = {crop[0], crop[1], crop[2], crop[3]};
  cfg.extractor_rows = ints(kv, "extractor_rows", 1)[0];
  const auto st = ints(kv, "stft", 4);
  cfg.stft = {st[0], st[1], st[2] != 0, st[3]};
  try {
    cfg.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("model header: ") + e.what());
  }
  return cfg;
}

void save_model(const std::filesystem::path& path, const WatermarkModel& model,
                const std::map<std::string, std::string>& provenance) {
  std::string header = network_header(model.config());
  for (const auto& [k, v] : provenance) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw UsageError("provenance entries may not contain '=' in keys or newlines");
    header += "provenance." + k + "=" + v + "\n";
  }

  Writer w;
  w.bytes(kMagic, 4);
  w.u16(kModelFormatVersion);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header.data(), header.size());
  const std::size_t payload = w.buffer().size();
  for (const auto& layer : parameter_manifest(model.config())) {
    const auto& t = model.params().at(layer.name).value;
    w.u16(static_cast<std::uint16_t>(layer.name.size()));
    w.bytes(layer.name.data(), layer.name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (Index d = 0; d < t.rank(); ++d) w.u32(static_cast<std::uint32_t>(t.dim(d)));
    for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
  }
  w.u32(crc(w.buffer().data() + payload, w.buffer().size() - payload));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!f) throw DataError("write failed: " + path.string());
}

ModelFile load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  const std::vector<char> buf{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  const std::string src = path.string();
  Reader r(buf, src);

  if (buf.size() < 4 || std::memcmp(r.take(4), kMagic, 4) != 0) throw DataError(src + ": not a model file (bad magic)");
  const auto version = r.u16();
  if (version != kModelFormatVersion)
    throw DataError(src + ": unsupported model format version " + std::to_string(version));
  const auto header_len = r.u32();
  const std::string header(r.take(header_len), header_len);

  std::map<std::string, std::string> kv;
  ModelFile out;
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(src + ": malformed header line: " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.starts_with("provenance."))
      out.provenance[key.substr(11)] = value;
    else
      kv[key] = value;
  }
  const NetworkConfig cfg = parse_network_header(kv);

  const std::size_t payload = r.pos();
  ad::ParamStore<float> store;
  for (const auto& layer : parameter_manifest(cfg)) {
    const auto name_len = r.u16();
    const std::string name(r.take(name_len), name_len);
    if (name != layer.name) throw DataError(src + ": expected tensor " + layer.name + ", found " + name);
    const auto rank = r.u32();
    ad::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<Index>(r.u32()));
    if (shape != layer.shape)
      throw DataError(src + ": tensor " + name + " has shape " + ad::shape_string(shape) + ", header topology implies " +
                      ad::shape_string(layer.shape));
    ad::Tensor<float> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = r.f32();
    store.add(name, std::move(t), layer.trainable);
  }
  const std::size_t payload_end = r.pos();
  const auto stored = r.u32();
  if (stored != crc(buf.data() + payload, payload_end - payload)) throw DataError(src + ": checksum mismatch");
  if (r.pos() != r.size()) throw DataError(src + ": trailing bytes after checksum");
  out.model = WatermarkModel(cfg, std::move(store));
  return out;
}

ModelFile load_model(const std::filesystem::path& path, const NetworkConfig& expected) {
  ModelFile file = load_model(path);
  if (!(file.model.config() == expected))
    throw DataError(path.string() + ": model topology (" + std::to_string(file.model.config().message_bits) +
                    "-bit) disagrees with the session (" + std::to_string(expected.message_bits) + "-bit)");
  return file;
}

}  // namespace nmrwm
