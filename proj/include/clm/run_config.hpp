#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/encoder.hpp"
#include "clm/pretrain.hpp"
#include "clm/transfer.hpp"
#include "clm/transfer_metrics.hpp"

namespace clm {

inline constexpr int kConfigSchemaVersion = 1;

struct CorpusConfig {
  std::string path;                      // empty: synthetic corpus
  std::size_t synthetic_tokens = 100000;
  double validation_fraction = 0.1;
  std::size_t max_tokens = 512;
};

// "toy:classification:<n>" / "toy:regression:<n>" name a built-in toy task;
// anything else is a CSV path.
struct TaskSpec {
  std::string name;
  std::string source;
};

struct ModelShape {
  std::size_t d_model = 64, n_head = 1, n_layer = 1, d_ff = 256;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::string run_id = "desk";
  std::uint64_t seed = 1;
  std::int64_t wall_clock = 0;
  std::size_t workers = 1;

  CorpusConfig corpus;
  ModelShape model;
  std::size_t max_len = 0;  // 0: longest ingested sequence + 2
  TrainSchedule schedule;
  std::vector<TaskSpec> tasks;

  std::vector<std::uint64_t> transfer_seeds{0, 1, 2};
  TransferOptions finetune;
  TransferOptions probe;

  std::size_t hutchinson_sequences = 2048;
  std::size_t hutchinson_minibatch = 128;
  std::size_t pgm_k = 10;
  std::size_t pgm_minibatch = 32;
  std::uint64_t eval_seed = 20240601;

  std::vector<ModelShape> axis_models;   // model axis
  std::vector<double> axis_fractions;    // data axis, nested train subsets
};

RunConfig default_run_config();
nlohmann::json to_json(const RunConfig& c);

// Checks `doc` against the schema (unknown keys, wrong types, version) and
// overlays it on the defaults.
RunConfig run_config_from_json(const nlohmann::json& doc);

// "a.b.c=value"; value parses as JSON when it can, else as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Reads the document at `path` (may be empty for defaults), applies overrides
// in order and validates.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

std::string run_config_hash(const RunConfig& c);

}  // namespace clm
