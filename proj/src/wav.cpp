#include "nmrwm/wav.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "nmrwm/error.hpp"

namespace nmrwm {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u16(std::vector<char>& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

double decode_sample(const std::uint8_t* p, std::uint16_t format, std::uint16_t bits) {
  if (format == kFormatFloat) {
    float f;
    const std::uint32_t raw = read_u32(p);
    std::memcpy(&f, &raw, sizeof f);
    return static_cast<double>(f);
  }
  if (bits == 16) return static_cast<double>(static_cast<std::int16_t>(read_u16(p))) / 32768.0;
  // 24-bit: sign-extend from the top byte.
  std::int32_t v = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
  if (v & 0x800000) v -= 0x1000000;
  return static_cast<double>(v) / 8388608.0;
}

}  // namespace

WavData load_wav(const std::filesystem::path& path, int require_rate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw DataError(path.string() + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_size = 0;
  bool have_fmt = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::size_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || body + size > bytes.size()) throw DataError(path.string() + ": truncated fmt chunk");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format == kFormatExtensible) {
        if (size < 40) throw DataError(path.string() + ": truncated WAVE_FORMAT_EXTENSIBLE header");
        format = read_u16(bytes.data() + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = std::min(size, bytes.size() - body);
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt) throw DataError(path.string() + ": missing fmt chunk");
  if (data == nullptr) throw DataError(path.string() + ": missing data chunk");

  const bool pcm_ok = format == kFormatPcm && (bits == 16 || bits == 24);
  const bool float_ok = format == kFormatFloat && bits == 32;
  if (!pcm_ok && !float_ok)
    throw DataError(path.string() + ": unsupported codec (format " + std::to_string(format) + ", " +
                    std::to_string(bits) + " bits)");
  if (channels != 1 && channels != 2)
    throw DataError(path.string() + ": unsupported channel count " + std::to_string(channels));
  if (require_rate != 0 && rate != static_cast<std::uint32_t>(require_rate))
    throw DataError(path.string() + ": sample rate " + std::to_string(rate) + " Hz, expected " +
                    std::to_string(require_rate));

  const std::size_t stride = static_cast<std::size_t>(bits / 8);
  const std::size_t frame = stride * channels;
  const auto count = static_cast<Eigen::Index>(data_size / frame);
  WavData out;
  out.sample_rate = static_cast<int>(rate);
  out.samples.resize(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const std::uint8_t* p = data + static_cast<std::size_t>(i) * frame;
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) acc += decode_sample(p + c * stride, format, bits);
    out.samples(i) = acc / channels;
  }
  return out;
}

void save_wav(const std::filesystem::path& path, const Eigen::Ref<const Eigen::VectorXd>& samples, int sample_rate) {
  const auto n = static_cast<std::uint32_t>(samples.size());
  std::vector<char> out;
  out.reserve(44 + 2 * static_cast<std::size_t>(n));
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + 2 * n);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, 2 * n);
  for (Eigen::Index i = 0; i < samples.size(); ++i) {
    const double clipped = std::clamp(samples(i), -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::clamp(std::lround(clipped * 32768.0), -32768L, 32767L));
    put_u16(out, static_cast<std::uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

}  // namespace nmrwm
