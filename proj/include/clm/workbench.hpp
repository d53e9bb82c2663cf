#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clm/checkpoint.hpp"
#include "clm/corpus.hpp"
#include "clm/pca.hpp"
#include "clm/run_config.hpp"
#include "clm/scaling.hpp"
#include "clm/transfer.hpp"
#include "clm/transfer_metrics.hpp"

namespace clm {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRunRootEnv = "CLM_RUN_ROOT";

// $CLM_RUN_ROOT, or ./runs when unset.
std::filesystem::path run_root();
std::filesystem::path run_directory(const RunConfig& config);

// ---- manifest ---------------------------------------------------------------

struct ManifestFile {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct ManifestCheckpoint {
  std::string id;
  double epoch_fraction = 0.0;
  std::string path;
  std::string config_hash;
};

struct RunManifest {
  std::string command;
  std::string run_id;
  std::string config_hash;
  std::string corpus_digest;
  std::vector<std::uint64_t> seeds;
  nlohmann::json schedule;
  std::vector<ManifestCheckpoint> checkpoints;
  std::vector<ManifestFile> files;
  std::string tool_version = kToolVersion;
  std::string started;
  std::string finished;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

// Appends one JSON line to <run_dir>/manifest.jsonl under an exclusive lock.
void append_manifest(const std::filesystem::path& run_dir, const RunManifest& m);
std::vector<RunManifest> read_manifest(const std::filesystem::path& run_dir);
// Hashes every listed file (the latest entry per path wins) and checks each
// checkpoint's header config hash. Returns the problems found.
std::vector<std::string> verify_manifest(const std::filesystem::path& run_dir);

// Records `path` (absolute or relative to run_dir) with its current hash.
void add_file(RunManifest& m, const std::filesystem::path& run_dir, const std::filesystem::path& path);
std::string utc_now();

// ---- data -------------------------------------------------------------------

struct PreparedData {
  IngestResult corpus;
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> validation;
  std::vector<DownstreamTask> tasks;
  std::string corpus_digest;
};

// Corpus lines from corpus.path, or the synthetic generator when it is empty.
std::vector<std::string> corpus_lines(const RunConfig& config);
DownstreamTask load_task(const TaskSpec& spec, std::uint64_t seed);
PreparedData prepare_data(const RunConfig& config);

// The configured shape plus vocabulary, dropout and a max_len covering every
// sequence (or the configured one).
ModelConfig model_config(const RunConfig& config, const ModelShape& shape, const PreparedData& data);

// ---- metrics ----------------------------------------------------------------

struct EvaluatedModel {
  std::string id;
  double epoch_fraction = 0.0;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  EncoderParameters params;
};

struct CheckpointEvaluation {
  MetricRecord record;
  // Fine-tuned encoder of the first transfer seed, one per task.
  std::vector<FinetunedModel> finetuned;
};

// L_pre, Tr(H), and per task L_down, PGM, fine-tuning and probe scores for
// every transfer seed. `index` selects the checkpoint's seed stream.
CheckpointEvaluation evaluate_checkpoint(const RunConfig& config, const PreparedData& data, const EvaluatedModel& model,
                                         std::uint64_t index);

// Runs fn(0..n-1) on up to `workers` threads; results must go to per-index
// slots so the outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

// ---- pipeline ---------------------------------------------------------------

enum class Axis { compute, model, data };
Axis parse_axis(std::string_view s);
std::string to_string(Axis a);

struct PipelineResult {
  std::filesystem::path run_dir;
  std::vector<MetricRecord> records;
  RunManifest manifest;
};

// Pretraining, transfer, metrics and analysis for one experiment axis. Writes
// metrics.csv, records.csv, consistency.csv, compute.csv and, per axis,
// pca.csv (compute) or scaling_points.csv (model, data) under
// <run_dir>/<axis>/, and appends the manifest.
PipelineResult run_pipeline(const RunConfig& config, Axis axis, const std::filesystem::path& run_dir);

std::string records_csv(const std::vector<EvaluatedModel>& models, const std::vector<MetricRecord>& records);
std::string metrics_csv(const std::vector<MetricRecord>& records);
std::string consistency_csv(const std::vector<ConsistencyRow>& rows);

}  // namespace clm
