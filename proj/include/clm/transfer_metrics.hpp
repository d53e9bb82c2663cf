#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clm/autodiff.hpp"
#include "clm/encoder.hpp"
#include "clm/pretrain.hpp"
#include "clm/tokenizer.hpp"
#include "clm/transfer.hpp"

namespace clm {

struct HutchinsonConfig {
  std::size_t n_sequences = 2048;
  std::size_t minibatch_size = 128;
  std::uint64_t seed = 0;

  // ceil(n_sequences / minibatch_size), one probe per minibatch.
  std::size_t probes() const { return (n_sequences + minibatch_size - 1) / minibatch_size; }
  void validate() const;
};

// Builds the loss of minibatch k.
using BatchLoss = std::function<ad::LossFn<double>(std::size_t k)>;

// (1/M) sum_k v_k' H_k v_k with v_k ~ N(0, I), H_k the Hessian of loss_for(k)
// at `params`. Probe k is drawn from an RNG derived from (seed, k).
double hutchinson_trace(const BatchLoss& loss_for, std::span<const Tensor<double>> params, std::size_t n_probes,
                        std::uint64_t seed);

// Tr(H) of the MLM loss over the encoder parameters (embedding tables held
// fixed). n_sequences are drawn from `data` without replacement and split into
// minibatches; dropout is off.
double hessian_trace(const EncoderParameters& params, std::span<const TokenSequence> data,
                     const HutchinsonConfig& config, const MaskingPolicy& policy = {});

struct PrincipalGradient {
  std::string task;
  std::size_t k = 0;
  std::vector<double> g;
};

// Mean of the K minibatch gradients of loss_for(0..K-1) at `params`, flattened.
PrincipalGradient principal_gradient(const BatchLoss& loss_for, std::span<const Tensor<double>> params,
                                     std::size_t K, std::string task = {});

// Source side: MLM loss on K random minibatches of `data`.
PrincipalGradient mlm_principal_gradient(const EncoderParameters& params, std::span<const TokenSequence> data,
                                         std::size_t K, std::size_t minibatch_size, std::uint64_t seed,
                                         const MaskingPolicy& policy = {});

// Target side: downstream loss through pooler(<bos>) and a fixed-seed random
// linear head, on K random minibatches of the training split. Only encoder
// components are kept. minibatch_size 0 uses batch_size_rule.
PrincipalGradient task_principal_gradient(const EncoderParameters& params, const Vocabulary& vocab,
                                          const DownstreamTask& task, std::size_t K, std::uint64_t seed,
                                          std::size_t minibatch_size = 0);

// |g_t - g_s| / (|g_s| |g_t|)
double pgm_distance(std::span<const double> g_source, std::span<const double> g_target);
double pgm_distance(const PrincipalGradient& source, const PrincipalGradient& target);

// MLM loss on the downstream inputs, no parameter updates. Unknown tokens map
// to <unk>; long inputs are truncated to fit max_len.
double zero_shot_downstream_loss(const EncoderParameters& params, const Vocabulary& vocab,
                                 std::span<const std::string> smiles, std::uint64_t eval_seed,
                                 const MaskingPolicy& policy = {});

struct TransferScore {
  std::string mode;  // ft | lp
  std::uint64_t seed = 0;
  std::string metric_name;
  double value = 0.0;
};

struct TaskMetrics {
  double l_down = 0.0;
  double pgm = 0.0;
  std::vector<TransferScore> scores;
};

struct MetricRecord {
  std::string checkpoint_id;
  double epoch_fraction = 0.0;
  double l_pre = 0.0;
  double tr_h = 0.0;
  std::map<std::string, TaskMetrics> tasks;

  // Throws naming the first non-finite field.
  void validate() const;
};

// Long-format metrics CSV: one row per (task, mode, seed).
inline const std::vector<std::string> kMetricsHeader{"checkpoint_id", "epoch_fraction", "l_pre", "task",  "l_down",
                                                     "mode",          "seed",           "metric_name", "value", "tr_h",
                                                     "pgm"};
std::vector<std::vector<std::string>> metric_rows(const MetricRecord& record);

}  // namespace clm
