#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nmrwm {

/// Names of the differentiable tensor ops covered by op_gradient_error.
const std::vector<std::string>& differentiable_ops();

/// Relative finite-difference error of one op on a small random case drawn from `seed`.
double op_gradient_error_f64(const std::string& op, std::uint64_t seed);
double op_gradient_error_f32(const std::string& op, std::uint64_t seed);

/// Relative error of nmr_gradient against central differences on `coords` random
/// coordinates of a random full-size host/marked pair.
double nmr_gradient_error(std::uint64_t seed, int coords = 24);

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Gradient checks, STFT reconstruction, band-map column sums and untrained-model BER.
std::vector<CheckOutcome> run_selfcheck(std::uint64_t seed);

}  // namespace nmrwm
