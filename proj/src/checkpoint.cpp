#include "clm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "clm/digest.hpp"

namespace clm {

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},       {"n_head", c.n_head},   {"n_layer", c.n_layer},
              {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
              {"dropout_rate", c.dropout_rate}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_head = j.at("n_head").get<std::size_t>();
  c.n_layer = j.at("n_layer").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  return c;
}

std::string config_hash(const ModelConfig& config) { return sha256_hex(config_to_json(config).dump()); }

namespace {

json meta_to_json(const CheckpointMeta& m) {
  return json{{"run_id", m.run_id},         {"step", m.step},           {"epoch_fraction", m.epoch_fraction},
              {"tokens_seen", m.tokens_seen}, {"wall_clock", m.wall_clock}, {"rng_digest", m.rng_digest},
              {"config_hash", m.config_hash}};
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta m;
  m.run_id = j.at("run_id").get<std::string>();
  m.step = j.at("step").get<std::uint64_t>();
  m.epoch_fraction = j.at("epoch_fraction").get<double>();
  m.tokens_seen = j.at("tokens_seen").get<std::uint64_t>();
  m.wall_clock = j.at("wall_clock").get<std::int64_t>();
  m.rng_digest = j.at("rng_digest").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  return m;
}

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_floats_le(std::vector<std::uint8_t>& out, std::span<const float> values) {
  for (float f : values) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

float read_float_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

[[noreturn]] void fail(CheckpointErrorKind kind, const std::string& msg) { throw CheckpointError(kind, msg); }

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> payload;
  payload.reserve(ckpt.params.total_size() * 4);
  json directory = json::array();
  for (const auto& t : ckpt.params.tensors) {
    const std::size_t offset = payload.size();
    append_floats_le(payload, t.value.data);
    directory.push_back(json{{"name", t.name}, {"shape", t.value.shape}, {"offset", offset},
                             {"length", payload.size() - offset}});
  }
  json header{{"format_version", 1},
              {"config", config_to_json(ckpt.params.config)},
              {"meta", meta_to_json(ckpt.meta)},
              {"tensors", directory},
              {"payload_bytes", payload.size()},
              {"payload_sha256", sha256_hex(payload)}};
  // Digest of the header without this field; the dump is canonical (sorted keys, compact).
  header["header_sha256"] = sha256_hex(header.dump());
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                  const std::optional<std::string>& expected_config_hash) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    fail(CheckpointErrorKind::bad_magic, "not a checkpoint file (bad magic)");
  }
  if (bytes.size() < 16) fail(CheckpointErrorKind::truncated, "checkpoint truncated inside the header length");
  const std::uint64_t header_len = get_u64_le(bytes.data() + 8);
  if (header_len > bytes.size() - 16) fail(CheckpointErrorKind::truncated, "checkpoint truncated inside the header");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    fail(CheckpointErrorKind::corrupt_header, std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  // Header integrity: the stored text must be the canonical dump and carry
  // the digest of itself minus the digest field.
  {
    const std::string_view text(reinterpret_cast<const char*>(bytes.data()) + 16, header_len);
    if (!header.is_object() || !header.contains("header_sha256") || !header["header_sha256"].is_string()) {
      fail(CheckpointErrorKind::corrupt_header, "checkpoint header has no digest");
    }
    if (header.dump() != text) fail(CheckpointErrorKind::corrupt_header, "checkpoint header is not in canonical form");
    json body = header;
    const auto stored = body["header_sha256"].get<std::string>();
    body.erase("header_sha256");
    if (sha256_hex(body.dump()) != stored) fail(CheckpointErrorKind::corrupt_header, "checkpoint header checksum mismatch");
  }

  Checkpoint ckpt;
  std::uint64_t payload_bytes = 0;
  std::string payload_sha;
  try {
    if (header.at("format_version").get<int>() != 1) fail(CheckpointErrorKind::corrupt_header, "unsupported format version");
    ckpt.params.config = config_from_json(header.at("config"));
    ckpt.meta = meta_from_json(header.at("meta"));
    payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    payload_sha = header.at("payload_sha256").get<std::string>();
  } catch (const json::exception& e) {
    fail(CheckpointErrorKind::corrupt_header, std::string("checkpoint header is missing fields: ") + e.what());
  }
  if (ckpt.meta.config_hash != config_hash(ckpt.params.config)) {
    fail(CheckpointErrorKind::corrupt_header, "checkpoint header config hash does not match its config");
  }
  if (expected_config_hash && *expected_config_hash != ckpt.meta.config_hash) {
    fail(CheckpointErrorKind::config_mismatch,
         "checkpoint config hash " + ckpt.meta.config_hash + " does not match expected " + *expected_config_hash);
  }

  const std::size_t payload_start = 16 + header_len;
  if (bytes.size() - payload_start < payload_bytes) fail(CheckpointErrorKind::truncated, "checkpoint payload truncated");
  if (bytes.size() - payload_start > payload_bytes) fail(CheckpointErrorKind::corrupt_header, "trailing bytes after payload");
  const auto payload = bytes.subspan(payload_start, payload_bytes);
  if (sha256_hex(payload) != payload_sha) fail(CheckpointErrorKind::checksum_mismatch, "checkpoint payload checksum mismatch");

  // The directory must tile the payload exactly and match the config layout.
  std::vector<ParamSpec> reference;
  try {
    ckpt.params.config.validate();
    reference = parameter_specs(ckpt.params.config);
  } catch (const std::invalid_argument& e) {
    fail(CheckpointErrorKind::corrupt_header, e.what());
  }
  std::uint64_t expected_offset = 0;
  try {
    const auto& dir = header.at("tensors");
    if (!dir.is_array() || dir.size() != reference.size()) {
      fail(CheckpointErrorKind::corrupt_header, "tensor directory does not match the model config");
    }
    for (std::size_t i = 0; i < dir.size(); ++i) {
      const auto& e = dir[i];
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      if (name != reference[i].name || shape != reference[i].shape) {
        fail(CheckpointErrorKind::corrupt_header, "tensor directory entry " + std::to_string(i) + " (" + name +
                                                      ") does not match the model config");
      }
      if (offset != expected_offset || length != shape_numel(shape) * 4) {
        fail(CheckpointErrorKind::corrupt_header, "tensor directory offsets do not tile the payload at " + name);
      }
      Tensor<float> t(shape);
      for (std::size_t k = 0; k < t.numel(); ++k) t.data[k] = read_float_le(payload.data() + offset + 4 * k);
      ckpt.params.tensors.push_back({name, std::move(t)});
      expected_offset += length;
    }
  } catch (const json::exception& e) {
    fail(CheckpointErrorKind::corrupt_header, std::string("bad tensor directory: ") + e.what());
  }
  if (expected_offset != payload_bytes) fail(CheckpointErrorKind::corrupt_header, "tensor directory does not cover the payload");
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(CheckpointErrorKind::io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(CheckpointErrorKind::io, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(CheckpointErrorKind::io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected_config_hash);
}

}  // namespace clm
