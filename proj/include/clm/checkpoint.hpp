#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/encoder.hpp"

namespace clm {

struct CheckpointMeta {
  std::string run_id;
  std::uint64_t step = 0;
  double epoch_fraction = 0.0;
  std::uint64_t tokens_seen = 0;
  // Seconds since the epoch as supplied by the run configuration; kept out of
  // the real clock so reruns stay byte-identical.
  std::int64_t wall_clock = 0;
  std::string rng_digest;
  std::string config_hash;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  EncoderParameters params;
  CheckpointMeta meta;
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);
// SHA-256 of the canonical JSON text of the config.
std::string config_hash(const ModelConfig& config);

enum class CheckpointErrorKind { io, bad_magic, truncated, corrupt_header, checksum_mismatch, config_mismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

// Layout: 8-byte magic, u64 little-endian header length, canonical JSON header
// (config, meta, tensor directory, payload SHA-256), then raw little-endian
// float32 payload in directory order.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                  const std::optional<std::string>& expected_config_hash = std::nullopt);

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_config_hash = std::nullopt);

// Writes `bytes` to `path` via a temporary file and an atomic rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace clm
