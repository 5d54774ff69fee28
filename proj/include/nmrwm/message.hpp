#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace nmrwm {

/// Extractor output: one probability per bit.
using SoftMessage = Eigen::VectorXd;

/// Payload bits, each 0 or 1.
class BitMessage {
 public:
  BitMessage() = default;
  explicit BitMessage(std::size_t length) : bits_(length, 0) {}
  explicit BitMessage(std::vector<std::uint8_t> bits);

  static BitMessage random(std::size_t length, std::mt19937_64& rng);
  /// Most significant bit of each hex digit first. Throws UsageError on bad digits.
  static BitMessage from_hex(std::string_view hex);

  std::string to_hex() const;
  std::size_t size() const { return bits_.size(); }
  std::uint8_t operator[](std::size_t i) const { return bits_[i]; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const BitMessage&, const BitMessage&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// bit_i = 1 iff p_i >= 0.5.
BitMessage round_message(const SoftMessage& soft);

/// Fraction of mismatched bits.
double ber(const BitMessage& predicted, const BitMessage& target);

}  // namespace nmrwm
