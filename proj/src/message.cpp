#include "nmrwm/message.hpp"

#include "nmrwm/error.hpp"

namespace nmrwm {

BitMessage::BitMessage(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto b : bits_)
    if (b > 1) throw UsageError("message bits must be 0 or 1");
}

BitMessage BitMessage::random(std::size_t length, std::mt19937_64& rng) {
  std::vector<std::uint8_t> bits(length);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng() >> 63);
  return BitMessage(std::move(bits));
}

BitMessage BitMessage::from_hex(std::string_view hex) {
  std::vector<std::uint8_t> bits;
  bits.reserve(hex.size() * 4);
  for (char ch : hex) {
    int v;
    if (ch >= '0' && ch <= '9')
      v = ch - '0';
    else if (ch >= 'a' && ch <= 'f')
      v = ch - 'a' + 10;
    else if (ch >= 'A' && ch <= 'F')
      v = ch - 'A' + 10;
    else
      throw UsageError(std::string("invalid hex digit '") + ch + "'");
    for (int s = 3; s >= 0; --s) bits.push_back(static_cast<std::uint8_t>((v >> s) & 1));
  }
  return BitMessage(std::move(bits));
}

std::string BitMessage::to_hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  for (std::size_t i = 0; i < bits_.size(); i += 4) {
    int v = 0;
    for (std::size_t j = 0; j < 4; ++j) v = (v << 1) | (i + j < bits_.size() ? bits_[i + j] : 0);
    out.push_back(kDigits[v]);
  }
  return out;
}

BitMessage round_message(const SoftMessage& soft) {
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(soft.size()));
  for (Eigen::Index i = 0; i < soft.size(); ++i) bits[static_cast<std::size_t>(i)] = soft(i) >= 0.5 ? 1 : 0;
  return BitMessage(std::move(bits));
}

double ber(const BitMessage& predicted, const BitMessage& target) {
  if (predicted.size() != target.size()) throw UsageError("ber: message length mismatch");
  if (target.size() == 0) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < target.size(); ++i) wrong += predicted[i] != target[i];
  return static_cast<double>(wrong) / static_cast<double>(target.size());
}

}  // namespace nmrwm
