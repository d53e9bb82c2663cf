#include "clm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "clm/rng.hpp"

namespace clm {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid model config: " + msg); };
  if (d_model == 0 || n_head == 0 || n_layer == 0 || d_ff == 0) fail("d_model, n_head, n_layer, d_ff must be positive");
  if (d_model % n_head != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_head (" + std::to_string(n_head) + ")");
  }
  if (vocab_size <= static_cast<std::size_t>(special::count)) fail("vocab_size must exceed the special tokens");
  if (max_len < 2) fail("max_len must be at least 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
}

std::size_t count_block_params(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t attention = 4 * d * d + 4 * d;
  const std::size_t ffn = 2 * d * f + f + d;
  const std::size_t norms = 4 * d;
  return attention + ffn + norms;
}

std::size_t count_non_embedding_params(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t embed_norm = 2 * d;
  const std::size_t head_transform = d * d + d + 2 * d;
  const std::size_t pooler = d * d + d;
  return embed_norm + c.n_layer * count_block_params(c) + head_transform + pooler;
}

ParamLayout::ParamLayout(std::size_t n_layer) {
  std::size_t next = 4;
  blocks.reserve(n_layer);
  for (std::size_t l = 0; l < n_layer; ++l) {
    Block b{};
    std::size_t* fields[] = {&b.q_weight,        &b.q_bias,        &b.k_weight,  &b.k_bias,
                             &b.v_weight,        &b.v_bias,        &b.attn_out_weight, &b.attn_out_bias,
                             &b.ln1_gamma,       &b.ln1_beta,      &b.ffn_in_weight,   &b.ffn_in_bias,
                             &b.ffn_out_weight,  &b.ffn_out_bias,  &b.ln2_gamma, &b.ln2_beta};
    for (auto* f : fields) *f = next++;
    blocks.push_back(b);
  }
  mlm_weight = next++;
  mlm_bias = next++;
  mlm_ln_gamma = next++;
  mlm_ln_beta = next++;
  mlm_output_bias = next++;
  pooler_weight = next++;
  pooler_bias = next++;
  total = next;
}

bool ParamLayout::is_embedding(std::size_t index) const {
  return index == token_embedding || index == position_embedding || index == mlm_output_bias;
}

std::vector<std::size_t> ParamLayout::final_block() const {
  const Block& b = blocks.back();
  return {b.q_weight,  b.q_bias,        b.k_weight,    b.k_bias,         b.v_weight,     b.v_bias,
          b.attn_out_weight, b.attn_out_bias, b.ln1_gamma, b.ln1_beta, b.ffn_in_weight, b.ffn_in_bias,
          b.ffn_out_weight, b.ffn_out_bias, b.ln2_gamma, b.ln2_beta};
}

std::size_t EncoderParameters::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.numel();
  return n;
}

std::vector<std::size_t> EncoderParameters::encoder_indices() const {
  const ParamLayout lay = layout();
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!lay.is_embedding(i)) out.push_back(i);
  }
  return out;
}

std::vector<float> EncoderParameters::flatten() const {
  std::vector<float> out;
  out.reserve(total_size());
  for (const auto& t : tensors) out.insert(out.end(), t.value.data.begin(), t.value.data.end());
  return out;
}

std::vector<float> EncoderParameters::flatten(std::span<const std::size_t> indices) const {
  std::vector<float> out;
  for (auto i : indices) out.insert(out.end(), tensors.at(i).value.data.begin(), tensors.at(i).value.data.end());
  return out;
}

void EncoderParameters::unflatten(std::span<const float> flat) {
  if (flat.size() != total_size()) {
    throw std::invalid_argument("unflatten: expected " + std::to_string(total_size()) + " values, got " +
                                std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (auto& t : tensors) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.value.numel(), t.value.data.begin());
    off += t.value.numel();
  }
}

bool EncoderParameters::operator==(const EncoderParameters& other) const {
  if (!(config == other.config) || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != other.tensors[i].name || !(tensors[i].value == other.tensors[i].value)) return false;
  }
  return true;
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& config) {
  const std::size_t d = config.d_model, f = config.d_ff, v = config.vocab_size;
  using enum ParamSpec::Init;
  std::vector<ParamSpec> specs;
  specs.push_back({"embed.token", {v, d}, normal});
  specs.push_back({"embed.position", {config.max_len, d}, normal});
  specs.push_back({"embed.ln.gamma", {d}, one});
  specs.push_back({"embed.ln.beta", {d}, zero});
  for (std::size_t l = 0; l < config.n_layer; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
      specs.push_back({pre + proj + ".weight", {d, d}, normal});
      specs.push_back({pre + proj + ".bias", {d}, zero});
    }
    specs.push_back({pre + "ln1.gamma", {d}, one});
    specs.push_back({pre + "ln1.beta", {d}, zero});
    specs.push_back({pre + "ffn.in.weight", {d, f}, normal});
    specs.push_back({pre + "ffn.in.bias", {f}, zero});
    specs.push_back({pre + "ffn.out.weight", {f, d}, normal});
    specs.push_back({pre + "ffn.out.bias", {d}, zero});
    specs.push_back({pre + "ln2.gamma", {d}, one});
    specs.push_back({pre + "ln2.beta", {d}, zero});
  }
  specs.push_back({"mlm.transform.weight", {d, d}, normal});
  specs.push_back({"mlm.transform.bias", {d}, zero});
  specs.push_back({"mlm.ln.gamma", {d}, one});
  specs.push_back({"mlm.ln.beta", {d}, zero});
  specs.push_back({"mlm.output.bias", {v}, zero});
  specs.push_back({"pooler.weight", {d, d}, normal});
  specs.push_back({"pooler.bias", {d}, zero});
  return specs;
}

EncoderParameters init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderParameters p;
  p.config = config;
  Rng rng(derive_seed(seed, "init"));
  for (auto& spec : parameter_specs(config)) {
    Tensor<float> t(spec.shape);
    switch (spec.init) {
      case ParamSpec::Init::normal:
        for (auto& x : t.data) x = static_cast<float>(rng.truncated_normal(0.02));
        break;
      case ParamSpec::Init::one:
        std::fill(t.data.begin(), t.data.end(), 1.0f);
        break;
      case ParamSpec::Init::zero:
        break;
    }
    p.tensors.push_back({std::move(spec.name), std::move(t)});
  }
  return p;
}

namespace {

Batch pad_batch(std::span<const std::vector<TokenId>> seqs, bool wrap) {
  if (seqs.empty()) throw std::invalid_argument("cannot build an empty batch");
  Batch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.seq_len = std::max(b.seq_len, s.size() + (wrap ? 2 : 0));
  b.ids.assign(b.positions(), special::pad);
  b.pad.assign(b.positions(), 1);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::size_t t = i * b.seq_len;
    auto put = [&](TokenId id) {
      b.ids[t] = id;
      b.pad[t] = id == special::pad ? 1 : 0;
      ++t;
    };
    if (wrap) put(special::bos);
    for (TokenId id : seqs[i]) put(id);
    if (wrap) put(special::eos);
  }
  return b;
}

template <class Real>
ad::Var<Real> affine_norm(const ad::Var<Real>& x, const ad::Var<Real>& gamma, const ad::Var<Real>& beta) {
  const std::size_t rows = x.value().rows();
  return ad::add_row(ad::mul(ad::layer_norm(x), ad::broadcast_rows(gamma, rows)), beta);
}

template <class Real>
ad::Var<Real> linear(const ad::Var<Real>& x, const ad::Var<Real>& w, const ad::Var<Real>& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

template <class Real>
ad::Var<Real> maybe_dropout(const ad::Var<Real>& x, double rate, Rng* rng) {
  if (!x.tape().training() || rate <= 0.0) return x;
  if (rng == nullptr) throw std::invalid_argument("training-mode forward pass needs a dropout RNG");
  return ad::dropout(x, static_cast<Real>(rate), *rng);
}

}  // namespace

Batch make_batch(std::span<const std::vector<TokenId>> contents) { return pad_batch(contents, true); }
Batch make_raw_batch(std::span<const std::vector<TokenId>> sequences) { return pad_batch(sequences, false); }

std::vector<std::uint8_t> special_positions(const Batch& batch) {
  std::vector<std::uint8_t> out(batch.positions());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const TokenId id = batch.ids[i];
    out[i] = (id == special::bos || id == special::eos || id == special::pad) ? 1 : 0;
  }
  return out;
}

template <class Real>
ad::Var<Real> encode(ad::Tape<Real>& tape, ParamVars<Real> params, const ModelConfig& config, const Batch& batch,
                     Rng* dropout_rng) {
  const ParamLayout lay(config.n_layer);
  if (params.size() != lay.total) {
    throw std::invalid_argument("encode: expected " + std::to_string(lay.total) + " parameter tensors, got " +
                                std::to_string(params.size()));
  }
  if (batch.seq_len > config.max_len) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq_len) + " exceeds max_len " +
                                std::to_string(config.max_len));
  }
  const std::size_t B = batch.batch, T = batch.seq_len, H = config.n_head;
  const std::size_t dh = config.d_model / H;

  std::vector<std::int32_t> positions(B * T);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % T);
  auto x = ad::add(ad::embedding(params[lay.token_embedding], std::span<const std::int32_t>(batch.ids)),
                   ad::embedding(params[lay.position_embedding], std::span<const std::int32_t>(positions)));
  x = affine_norm(x, params[lay.embed_ln_gamma], params[lay.embed_ln_beta]);
  x = maybe_dropout(x, config.dropout_rate, dropout_rng);

  // Additive key mask: padded keys get a large negative score.
  Tensor<Real> key_mask(Shape{B * H, T, T});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j)
          key_mask.data[((b * H + h) * T + i) * T + j] = batch.pad[b * T + j] ? Real(-1e9) : Real(0);
  auto mask = tape.constant(std::move(key_mask));
  const Real score_scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  for (const auto& blk : lay.blocks) {
    auto q = ad::split_heads(linear(x, params[blk.q_weight], params[blk.q_bias]), B, H);
    auto k = ad::split_heads(linear(x, params[blk.k_weight], params[blk.k_bias]), B, H);
    auto v = ad::split_heads(linear(x, params[blk.v_weight], params[blk.v_bias]), B, H);
    auto scores = ad::add(ad::scale(ad::matmul(q, k, false, true), score_scale), mask);
    auto attn = maybe_dropout(ad::softmax(scores), config.dropout_rate, dropout_rng);
    auto ctx = ad::merge_heads(ad::matmul(attn, v), B, H);
    auto attn_out = maybe_dropout(linear(ctx, params[blk.attn_out_weight], params[blk.attn_out_bias]),
                                  config.dropout_rate, dropout_rng);
    x = affine_norm(ad::add(x, attn_out), params[blk.ln1_gamma], params[blk.ln1_beta]);

    auto hidden = ad::gelu(linear(x, params[blk.ffn_in_weight], params[blk.ffn_in_bias]));
    auto ffn_out = maybe_dropout(linear(hidden, params[blk.ffn_out_weight], params[blk.ffn_out_bias]),
                                 config.dropout_rate, dropout_rng);
    x = affine_norm(ad::add(x, ffn_out), params[blk.ln2_gamma], params[blk.ln2_beta]);
  }
  return x;
}

template <class Real>
ad::Var<Real> mlm_logits(ParamVars<Real> params, const ModelConfig& config, const ad::Var<Real>& hidden,
                         std::span<const std::int32_t> rows) {
  const ParamLayout lay(config.n_layer);
  auto h = ad::embedding(hidden, rows);
  h = ad::gelu(linear(h, params[lay.mlm_weight], params[lay.mlm_bias]));
  h = affine_norm(h, params[lay.mlm_ln_gamma], params[lay.mlm_ln_beta]);
  return ad::add_row(ad::matmul(h, params[lay.token_embedding], false, true), params[lay.mlm_output_bias]);
}

template <class Real>
ad::Var<Real> forward_mlm(ad::Tape<Real>& tape, ParamVars<Real> params, const ModelConfig& config,
                          const Batch& batch, Rng* dropout_rng) {
  auto hidden = encode(tape, params, config, batch, dropout_rng);
  std::vector<std::int32_t> all(batch.positions());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int32_t>(i);
  return mlm_logits(params, config, hidden, std::span<const std::int32_t>(all));
}

template <class Real>
ad::Var<Real> pool_bos(const ad::Var<Real>& hidden, const Batch& batch) {
  std::vector<std::int32_t> rows(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (batch.ids[b * batch.seq_len] != special::bos) {
      throw std::invalid_argument("pool_bos: sequence " + std::to_string(b) + " does not start with <bos>");
    }
    rows[b] = static_cast<std::int32_t>(b * batch.seq_len);
  }
  return ad::embedding(hidden, std::span<const std::int32_t>(rows));
}

template <class Real>
ad::Var<Real> pool_mean(const ad::Var<Real>& hidden, std::size_t batch, std::span<const std::uint8_t> special_mask) {
  const std::size_t positions = hidden.value().rows();
  if (batch == 0 || positions % batch != 0 || special_mask.size() != positions) {
    throw ad::ShapeError("pool_mean: mask of " + std::to_string(special_mask.size()) + " entries for hidden " +
                         shape_str(hidden.shape()) + " and batch " + std::to_string(batch));
  }
  const std::size_t T = positions / batch;
  Tensor<Real> weights(Shape{batch, positions});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < T; ++t) count += special_mask[b * T + t] ? 0 : 1;
    if (count == 0) throw std::invalid_argument("pool_mean: sequence " + std::to_string(b) + " has no content tokens");
    for (std::size_t t = 0; t < T; ++t) {
      if (!special_mask[b * T + t]) weights.data[b * positions + b * T + t] = Real(1) / static_cast<Real>(count);
    }
  }
  return ad::matmul(hidden.tape().constant(std::move(weights)), hidden);
}

template <class Real>
ad::Var<Real> pooler(ParamVars<Real> params, const ModelConfig& config, const ad::Var<Real>& bos_states) {
  const ParamLayout lay(config.n_layer);
  return ad::tanh(linear(bos_states, params[lay.pooler_weight], params[lay.pooler_bias]));
}

#define CLM_INSTANTIATE(R)                                                                                     \
  template ad::Var<R> encode(ad::Tape<R>&, ParamVars<R>, const ModelConfig&, const Batch&, Rng*);             \
  template ad::Var<R> mlm_logits(ParamVars<R>, const ModelConfig&, const ad::Var<R>&,                         \
                                 std::span<const std::int32_t>);                                              \
  template ad::Var<R> forward_mlm(ad::Tape<R>&, ParamVars<R>, const ModelConfig&, const Batch&, Rng*);        \
  template ad::Var<R> pool_bos(const ad::Var<R>&, const Batch&);                                              \
  template ad::Var<R> pool_mean(const ad::Var<R>&, std::size_t, std::span<const std::uint8_t>);               \
  template ad::Var<R> pooler(ParamVars<R>, const ModelConfig&, const ad::Var<R>&);

CLM_INSTANTIATE(float)
CLM_INSTANTIATE(double)

#undef CLM_INSTANTIATE

}  // namespace clm
