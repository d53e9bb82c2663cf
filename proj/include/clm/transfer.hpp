#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clm/autodiff.hpp"
#include "clm/encoder.hpp"
#include "clm/tokenizer.hpp"

namespace clm {

enum class TaskKind { classification, regression };
enum class MetricKind { roc_auc, mae, rmse };

std::string to_string(TaskKind k);
std::string to_string(MetricKind m);
TaskKind parse_task_kind(std::string_view s);
MetricKind parse_metric_kind(std::string_view s);

struct SplitDataset {
  std::vector<std::size_t> train, valid, test;
};

struct DownstreamTask {
  std::string name;
  TaskKind kind = TaskKind::classification;
  MetricKind metric = MetricKind::roc_auc;
  std::vector<std::string> target_names;
  std::vector<std::string> smiles;
  // labels[i * n_targets() + t]; NaN marks a missing label.
  std::vector<double> labels;
  SplitDataset splits;

  std::size_t n_targets() const { return target_names.size(); }
  std::size_t n_samples() const { return smiles.size(); }
  double label(std::size_t i, std::size_t t) const { return labels[i * n_targets() + t]; }
  // Label values, metric/kind pairing, split coverage.
  void validate() const;
};

// Reads `smiles,split,<targets...>`. Without an explicit kind, a task whose
// observed labels are all 0/1 is classification (roc_auc), anything else
// regression (rmse).
DownstreamTask parse_task_csv(std::string_view text, std::string name, std::optional<TaskKind> kind = std::nullopt,
                              std::optional<MetricKind> metric = std::nullopt);
DownstreamTask load_task_csv(const std::filesystem::path& path, std::optional<TaskKind> kind = std::nullopt,
                             std::optional<MetricKind> metric = std::nullopt);

// Per-target mean and population standard deviation over the observed
// training labels.
struct TargetNormalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static TargetNormalizer fit(const DownstreamTask& task, std::span<const std::size_t> rows);
  // Identity normalizer for classification targets.
  static TargetNormalizer identity(std::size_t n_targets);
  double normalize(double y, std::size_t target) const { return (y - mean[target]) / stddev[target]; }
  double denormalize(double z, std::size_t target) const { return z * stddev[target] + mean[target]; }
};

// 32 up to 1000 samples, 256 up to 5000, 512 beyond.
std::size_t batch_size_rule(std::size_t n_samples);

// Mann-Whitney form: P(score_pos > score_neg) with ties counted one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
// NaN entries in `y` (or `pred`) are skipped pairwise.
double mae(std::span<const double> pred, std::span<const double> y);
double rmse(std::span<const double> pred, std::span<const double> y);

// Mean over observed cells of outputs[B, k]: sigmoid cross-entropy (labels 0/1)
// or squared error. `observed[i]` flags cell i of the row-major [B, k] grid.
template <class Real>
ad::Var<Real> multitask_loss(const ad::Var<Real>& outputs, std::span<const double> labels,
                             std::span<const std::uint8_t> observed, TaskKind kind);

struct TransferOptions {
  double lr = 3e-5;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t batch_size = 0;  // 0 picks batch_size_rule(|train|)
};

// Linear prediction head: outputs = x W + b, W [d, k].
struct LinearHead {
  Tensor<float> weight;
  Tensor<float> bias;
};

LinearHead init_head(std::size_t d, std::size_t k, std::uint64_t seed);

struct TransferResult {
  std::string metric_name;
  double metric = 0.0;              // mean over targets, original label scale
  std::vector<double> per_target;   // NaN where a target has no usable test data
  double best_valid_loss = 0.0;
  std::size_t best_epoch = 0;       // 0 = the untrained initial state
  std::size_t epochs_run = 0;
  LinearHead head;
  EncoderParameters encoder;        // fine-tuned encoder (finetune), input encoder (probe)
};

// Sequences of the task tokenized under `vocab` (unknowns -> <unk>), content
// truncated to fit max_len with <bos>/<eos>.
std::vector<std::vector<TokenId>> task_token_ids(const DownstreamTask& task, const Vocabulary& vocab,
                                                 std::size_t max_len);

// Encoder + pooler over <bos>, linear head; encoder and head are trained.
TransferResult finetune(const EncoderParameters& encoder, const Vocabulary& vocab, const DownstreamTask& task,
                        std::uint64_t seed, const TransferOptions& options = {});

// Frozen encoder, mean pooling over content tokens, linear head only.
TransferResult linear_probe(const EncoderParameters& encoder, const Vocabulary& vocab, const DownstreamTask& task,
                            std::uint64_t seed, const TransferOptions& options = {});

// The probe's head training on precomputed features [n_samples, d].
TransferResult probe_on_features(const Tensor<float>& features, const DownstreamTask& task, std::uint64_t seed,
                                 const TransferOptions& options = {});

struct SeedSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1) standard deviation; 0 for one seed
};
SeedSummary summarize_seeds(std::span<const double> values);

}  // namespace clm
