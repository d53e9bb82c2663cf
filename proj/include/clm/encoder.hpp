#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clm/autodiff.hpp"
#include "clm/tensor.hpp"
#include "clm/tokenizer.hpp"

namespace clm {

class Rng;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_head = 1;
  std::size_t n_layer = 1;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  // Positional table size, counting the <bos> and <eos> slots.
  std::size_t max_len = 128;
  double dropout_rate = 0.1;

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Non-embedding parameter count: embedding layer norm, every encoder block,
// the MLM head transform and the pooler. Token/position tables and the tied
// output projection (with its bias) are not counted.
std::size_t count_non_embedding_params(const ModelConfig& config);
// Attention + FFN + both layer norms of one encoder block.
std::size_t count_block_params(const ModelConfig& config);

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

// Fixed tensor positions inside EncoderParameters::tensors. The order is a
// pure function of the config.
struct ParamLayout {
  struct Block {
    std::size_t q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, attn_out_weight, attn_out_bias;
    std::size_t ln1_gamma, ln1_beta, ffn_in_weight, ffn_in_bias, ffn_out_weight, ffn_out_bias, ln2_gamma, ln2_beta;
  };
  std::size_t token_embedding = 0, position_embedding = 1, embed_ln_gamma = 2, embed_ln_beta = 3;
  std::vector<Block> blocks;
  std::size_t mlm_weight, mlm_bias, mlm_ln_gamma, mlm_ln_beta, mlm_output_bias;
  std::size_t pooler_weight, pooler_bias;
  std::size_t total;

  explicit ParamLayout(std::size_t n_layer);

  // Token table, position table and output bias.
  bool is_embedding(std::size_t index) const;
  // Tensor indices of the final encoder block, in order.
  std::vector<std::size_t> final_block() const;
};

struct EncoderParameters {
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  ParamLayout layout() const { return ParamLayout(config.n_layer); }
  std::size_t total_size() const;
  // Indices of the non-embedding tensors (the "encoder" set for curvature and
  // gradient metrics).
  std::vector<std::size_t> encoder_indices() const;

  std::vector<float> flatten() const;
  // Concatenation of the tensors listed in `indices`, in that order.
  std::vector<float> flatten(std::span<const std::size_t> indices) const;
  void unflatten(std::span<const float> flat);

  template <class Real>
  std::vector<Tensor<Real>> as() const {
    std::vector<Tensor<Real>> out;
    out.reserve(tensors.size());
    for (const auto& t : tensors) out.push_back(t.value.template cast<Real>());
    return out;
  }

  bool operator==(const EncoderParameters& other) const;
};

struct ParamSpec {
  enum class Init { normal, zero, one };
  std::string name;
  Shape shape;
  Init init;
};

// Names, shapes and initializers of every tensor, in ParamLayout order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

// Truncated normal(0.02) weights, zero biases, unit layer-norm scales.
EncoderParameters init_model(const ModelConfig& config, std::uint64_t seed);

// A padded batch of model inputs, laid out [batch, seq_len] row-major.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  // 1 where the position is <pad>.
  std::vector<std::uint8_t> pad;

  std::size_t positions() const { return batch * seq_len; }
};

// Wraps each content sequence in <bos>/<eos> and right-pads to the longest.
Batch make_batch(std::span<const std::vector<TokenId>> contents);
// Uses the ids exactly as given (no <bos>/<eos> added), padding to the longest.
Batch make_raw_batch(std::span<const std::vector<TokenId>> sequences);

// Parameter leaves for one forward pass; tensor order follows ParamLayout.
template <class Real>
using ParamVars = std::span<const ad::Var<Real>>;

// Final-layer hidden states [batch * seq_len, d_model]. Dropout is active only
// when the tape is in training mode, drawing from `dropout_rng`.
template <class Real>
ad::Var<Real> encode(ad::Tape<Real>& tape, ParamVars<Real> params, const ModelConfig& config, const Batch& batch,
                     Rng* dropout_rng = nullptr);

// MLM logits for the given rows of `hidden` -> [rows.size(), vocab].
template <class Real>
ad::Var<Real> mlm_logits(ParamVars<Real> params, const ModelConfig& config, const ad::Var<Real>& hidden,
                         std::span<const std::int32_t> rows);

// Logits at every position -> [batch * seq_len, vocab].
template <class Real>
ad::Var<Real> forward_mlm(ad::Tape<Real>& tape, ParamVars<Real> params, const ModelConfig& config,
                          const Batch& batch, Rng* dropout_rng = nullptr);

// Final hidden state at position 0 of each sequence -> [batch, d_model].
// Throws if a sequence does not start with <bos>.
template <class Real>
ad::Var<Real> pool_bos(const ad::Var<Real>& hidden, const Batch& batch);

// Mean over positions whose `special_mask` entry is 0 -> [batch, d_model].
// Throws if a sequence has no such position.
template <class Real>
ad::Var<Real> pool_mean(const ad::Var<Real>& hidden, std::size_t batch, std::span<const std::uint8_t> special_mask);

// <bos>/<eos>/<pad> positions of `batch`.
std::vector<std::uint8_t> special_positions(const Batch& batch);

// tanh(W h + b) over pooled <bos> states.
template <class Real>
ad::Var<Real> pooler(ParamVars<Real> params, const ModelConfig& config, const ad::Var<Real>& bos_states);

}  // namespace clm
