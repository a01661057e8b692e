#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "websod/detector.hpp"
#include "websod/rfr_block.hpp"

namespace websod {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint layout: a text header (magic line, `key=value` schema lines,
/// `---`) followed by little-endian binary tensors, each written as
/// name length (u32), name, rank (u32), dims (i32 each), doubles.
inline constexpr int kCheckpointVersion = 1;

std::string serialize_detector(const det::DetectorParams& params);
det::DetectorParams deserialize_detector(std::string_view bytes);
std::string serialize_rfr(const rfr::RfrBlock& block);
rfr::RfrBlock deserialize_rfr(std::string_view bytes);

void save_detector(const std::filesystem::path& path, const det::DetectorParams& params);
det::DetectorParams load_detector(const std::filesystem::path& path);
void save_rfr(const std::filesystem::path& path, const rfr::RfrBlock& block);
rfr::RfrBlock load_rfr(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string digest(const det::DetectorParams& params);
std::string digest(const rfr::RfrBlock& block);

std::map<std::string, std::string> detector_config_to_kv(const det::DetectorConfig& config);
det::DetectorConfig detector_config_from_kv(const std::map<std::string, std::string>& kv);

}  // namespace websod
