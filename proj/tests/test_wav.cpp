#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "nmrwm/error.hpp"
#include "nmrwm/wav.hpp"

using namespace nmrwm;
namespace fs = std::filesystem;

namespace {

void put16(std::vector<char>& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>(v >> 8));
}
void put32(std::vector<char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Hand-assembled 16-bit PCM file.
fs::path write_pcm16(const std::string& name, int rate, int channels, const std::vector<std::int16_t>& frames) {
  std::vector<char> b;
  const auto data_bytes = static_cast<std::uint32_t>(frames.size() * 2);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put32(b, 36 + data_bytes);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put32(b, 16);
  put16(b, 1);
  put16(b, static_cast<std::uint16_t>(channels));
  put32(b, static_cast<std::uint32_t>(rate));
  put32(b, static_cast<std::uint32_t>(rate * channels * 2));
  put16(b, static_cast<std::uint16_t>(channels * 2));
  put16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put32(b, data_bytes);
  for (auto s : frames) put16(b, static_cast<std::uint16_t>(s));
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream(p, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
  return p;
}

}  // namespace

TEST(Wav, FullScale16Bit) {
  const auto p = write_pcm16("nmrwm_fullscale.wav", 44100, 1, std::vector<std::int16_t>(44100, 32767));
  const auto w = load_wav(p);
  ASSERT_EQ(w.samples.size(), 44100);
  EXPECT_NEAR(w.samples.minCoeff(), 0.99997, 1e-5);
  EXPECT_EQ(w.samples.minCoeff(), w.samples.maxCoeff());
}

TEST(Wav, StereoAveragesToMono) {
  std::vector<std::int16_t> frames;
  for (int i = 0; i < 100; ++i) {
    frames.push_back(16384);
    frames.push_back(-16384);
  }
  const auto w = load_wav(write_pcm16("nmrwm_stereo.wav", 44100, 2, frames));
  ASSERT_EQ(w.samples.size(), 100);
  EXPECT_EQ(w.samples.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Wav, WrongRate) {
  const auto p = write_pcm16("nmrwm_48k.wav", 48000, 1, std::vector<std::int16_t>(10, 0));
  EXPECT_THROW(load_wav(p), DataError);
  EXPECT_EQ(load_wav(p, 0).sample_rate, 48000);
}

TEST(Wav, NotRiff) {
  const fs::path p = fs::temp_directory_path() / "nmrwm_garbage.wav";
  std::ofstream(p) << "definitely not audio";
  EXPECT_THROW(load_wav(p), DataError);
  EXPECT_THROW(load_wav(fs::temp_directory_path() / "nmrwm_missing_file.wav"), DataError);
}

TEST(Wav, SaveLoadRoundTrip) {
  Eigen::VectorXd x(1000);
  for (int i = 0; i < 1000; ++i) x(i) = std::sin(0.01 * i) * 0.8;
  x(0) = 1.7;  // clipped on write
  const fs::path p = fs::temp_directory_path() / "nmrwm_roundtrip.wav";
  save_wav(p, x);
  const auto w = load_wav(p);
  ASSERT_EQ(w.samples.size(), 1000);
  EXPECT_NEAR(w.samples(0), 1.0, 1e-4);
  EXPECT_LT((w.samples.tail(999) - x.tail(999)).cwiseAbs().maxCoeff(), 1.0 / 32767.0);
}
