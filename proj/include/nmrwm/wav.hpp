#pragma once

#include <filesystem>

#include <Eigen/Dense>

namespace nmrwm {

struct WavData {
  Eigen::VectorXd samples;  // mono, nominal range [-1, 1]
  int sample_rate = 0;
};

/// Reads PCM 16/24-bit or IEEE float 32-bit WAV, mono or stereo (averaged to mono).
/// Throws DataError on malformed files and, when `require_rate` is non-zero, on a
/// different sample rate.
WavData load_wav(const std::filesystem::path& path, int require_rate = 44100);

/// Writes 16-bit PCM mono, clipping to [-1, 1].
void save_wav(const std::filesystem::path& path, const Eigen::Ref<const Eigen::VectorXd>& samples,
              int sample_rate = 44100);

}  // namespace nmrwm
