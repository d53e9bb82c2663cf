#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clm/autodiff.hpp"
#include "clm/checkpoint.hpp"
#include "clm/encoder.hpp"
#include "clm/rng.hpp"
#include "clm/tokenizer.hpp"

namespace clm {

struct MaskingPolicy {
  double select_rate = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;

  void validate() const;
};

struct MaskedSequence {
  std::vector<TokenId> ids;           // corrupted input
  std::vector<std::size_t> positions;  // selected positions, ascending
  std::vector<TokenId> targets;        // original ids at `positions`
};

// Selects round(select_rate * n) (at least 1) of the n non-special positions
// uniformly without replacement, then replaces each with <mask> / a random
// non-special token / itself with the policy's 80/10/10 split.
MaskedSequence apply_mlm_mask(std::span<const TokenId> ids, const MaskingPolicy& policy, std::size_t vocab_size,
                              Rng& rng);

// Number of positions selected for a sequence with `content` maskable tokens.
std::size_t selection_count(std::size_t content, double select_rate);

// A padded, masked batch ready for the model: `rows` index the flattened
// [batch * seq_len] positions that carry an MLM target.
struct MaskedBatch {
  Batch batch;
  std::vector<std::int32_t> rows;
  std::vector<std::int32_t> targets;
};

// Wraps each content sequence in <bos>/<eos>, masks it with its own RNG from
// `rngs`, and pads.
MaskedBatch make_masked_batch(std::span<const std::vector<TokenId>> contents, const MaskingPolicy& policy,
                              std::size_t vocab_size, std::span<Rng> rngs);

// Mean cross-entropy over the selected positions. `logits` holds one row per
// selected position.
template <class Real>
ad::Var<Real> mlm_loss(const ad::Var<Real>& logits, std::span<const std::int32_t> targets);

// MLM loss of one masked batch under `params`.
template <class Real>
ad::Var<Real> mlm_batch_loss(ad::Tape<Real>& tape, ParamVars<Real> params, const ModelConfig& config,
                             const MaskedBatch& mb, Rng* dropout_rng = nullptr);

struct TrainSchedule {
  std::uint64_t warmup_steps = 5000;
  double peak_lr = 1e-3;
  double weight_decay = 0.01;
  double dropout = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;  // sequences per step
  double epochs = 4.0;
  double checkpoint_interval_epochs = 0.25;
  bool save_step0 = true;
  MaskingPolicy masking;

  void validate() const;
};

// Linear warmup from 0 to peak_lr, constant afterwards.
double lr_at(std::uint64_t step, const TrainSchedule& schedule);

struct LossLogRow {
  std::uint64_t step;
  double epoch_fraction;
  double train_loss;
  double lr;
};

struct TrainResult {
  std::vector<CheckpointMeta> checkpoints;  // metadata of everything passed to the sink
  std::vector<LossLogRow> log;
  EncoderParameters final_params;
};

using CheckpointSink = std::function<void(const Checkpoint&)>;

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, Checkpoint diagnostic)
      : std::runtime_error(what), diagnostic_(std::move(diagnostic)) {}
  const Checkpoint& diagnostic() const { return diagnostic_; }

 private:
  Checkpoint diagnostic_;
};

struct TrainOptions {
  std::string run_id = "run";
  std::int64_t wall_clock = 0;
};

// MLM pretraining. Emits a checkpoint at every interval boundary (and at step
// 0 when requested) through `sink`. Each epoch visits a seeded permutation of
// `train` and drops the final partial batch.
TrainResult train(ModelConfig config, const TrainSchedule& schedule, std::span<const TokenSequence> train,
                  std::uint64_t seed, const CheckpointSink& sink, const TrainOptions& options = {});

// Validation MLM loss (dropout off). Sequence i is masked with an RNG derived
// from (eval_seed, i), so the value does not depend on batching.
double eval_pretrain_loss(const EncoderParameters& params, std::span<const TokenSequence> validation,
                          std::uint64_t eval_seed, const MaskingPolicy& policy = {}, std::size_t batch_size = 64);

// Decay mask: weight matrices decay; biases, layer norms and the embedding
// tables do not.
std::vector<bool> weight_decay_mask(const EncoderParameters& params);

}  // namespace clm
