#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "nmrwm/networks.hpp"

namespace nmrwm {

/// Container layout (little-endian):
///   "NMWM" | u16 version | u32 header length | header text (key=value lines)
///   | per tensor in manifest order: u16 name length, name, u32 rank, u32 dims[rank], f32 values
///   | u32 CRC-32 of the tensor section
inline constexpr std::uint16_t kModelFormatVersion = 1;

struct ModelFile {
  WatermarkModel model;
  std::map<std::string, std::string> provenance;  // free-form training metadata
};

void save_model(const std::filesystem::path& path, const WatermarkModel& model,
                const std::map<std::string, std::string>& provenance = {});

/// Throws DataError on bad magic, unsupported version, truncation, checksum failure or
/// tensors disagreeing with the header topology.
ModelFile load_model(const std::filesystem::path& path);

/// Also requires the stored topology to equal `expected`.
ModelFile load_model(const std::filesystem::path& path, const NetworkConfig& expected);

/// key=value header text for a topology; parse_network_header inverts it.
std::string network_header(const NetworkConfig& cfg);
NetworkConfig parse_network_header(const std::map<std::string, std::string>& kv);

}  // namespace nmrwm
