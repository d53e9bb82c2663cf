#include "clm/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "clm/digest.hpp"
#include "clm/optimizer.hpp"

namespace clm {

void MaskingPolicy::validate() const {
  if (!(select_rate > 0.0 && select_rate < 1.0)) throw std::invalid_argument("masking select_rate must lie in (0, 1)");
  if (mask_frac < 0.0 || random_frac < 0.0 || keep_frac < 0.0 ||
      std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-12) {
    throw std::invalid_argument("masking fractions must be non-negative and sum to 1");
  }
}

std::size_t selection_count(std::size_t content, double select_rate) {
  const auto k = static_cast<std::size_t>(std::llround(select_rate * static_cast<double>(content)));
  return std::clamp<std::size_t>(k, 1, content);
}

MaskedSequence apply_mlm_mask(std::span<const TokenId> ids, const MaskingPolicy& policy, std::size_t vocab_size,
                              Rng& rng) {
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!is_special(ids[i])) maskable.push_back(i);
  }
  if (maskable.empty()) throw std::invalid_argument("sequence has no maskable positions");
  const std::size_t k = selection_count(maskable.size(), policy.select_rate);
  // Partial Fisher-Yates: the first k entries become a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(maskable.size() - i);
    std::swap(maskable[i], maskable[j]);
  }
  MaskedSequence out;
  out.ids.assign(ids.begin(), ids.end());
  out.positions.assign(maskable.begin(), maskable.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.positions.begin(), out.positions.end());
  const auto n_regular = vocab_size - static_cast<std::size_t>(special::count);
  for (auto pos : out.positions) {
    out.targets.push_back(ids[pos]);
    const double u = rng.uniform();
    if (u < policy.mask_frac) {
      out.ids[pos] = special::mask;
    } else if (u < policy.mask_frac + policy.random_frac) {
      out.ids[pos] = static_cast<TokenId>(special::count + static_cast<TokenId>(rng.below(n_regular)));
    }
  }
  return out;
}

MaskedBatch make_masked_batch(std::span<const std::vector<TokenId>> contents, const MaskingPolicy& policy,
                              std::size_t vocab_size, std::span<Rng> rngs) {
  if (rngs.size() != contents.size()) throw std::invalid_argument("make_masked_batch: one RNG per sequence required");
  std::vector<std::vector<TokenId>> corrupted;
  std::vector<MaskedSequence> masked;
  corrupted.reserve(contents.size());
  for (std::size_t i = 0; i < contents.size(); ++i) {
    std::vector<TokenId> wrapped;
    wrapped.reserve(contents[i].size() + 2);
    wrapped.push_back(special::bos);
    wrapped.insert(wrapped.end(), contents[i].begin(), contents[i].end());
    wrapped.push_back(special::eos);
    masked.push_back(apply_mlm_mask(wrapped, policy, vocab_size, rngs[i]));
    corrupted.push_back(masked.back().ids);
  }
  MaskedBatch mb;
  mb.batch = make_raw_batch(corrupted);
  for (std::size_t i = 0; i < masked.size(); ++i) {
    for (std::size_t k = 0; k < masked[i].positions.size(); ++k) {
      mb.rows.push_back(static_cast<std::int32_t>(i * mb.batch.seq_len + masked[i].positions[k]));
      mb.targets.push_back(masked[i].targets[k]);
    }
  }
  return mb;
}

template <class Real>
ad::Var<Real> mlm_loss(const ad::Var<Real>& logits, std::span<const std::int32_t> targets) {
  if (targets.empty()) throw std::invalid_argument("mlm_loss: empty selection");
  return ad::cross_entropy(logits, targets);
}

template <class Real>
ad::Var<Real> mlm_batch_loss(ad::Tape<Real>& tape, ParamVars<Real> params, const ModelConfig& config,
                             const MaskedBatch& mb, Rng* dropout_rng) {
  auto hidden = encode(tape, params, config, mb.batch, dropout_rng);
  auto logits = mlm_logits(params, config, hidden, std::span<const std::int32_t>(mb.rows));
  return mlm_loss(logits, std::span<const std::int32_t>(mb.targets));
}

template ad::Var<float> mlm_loss(const ad::Var<float>&, std::span<const std::int32_t>);
template ad::Var<double> mlm_loss(const ad::Var<double>&, std::span<const std::int32_t>);
template ad::Var<float> mlm_batch_loss(ad::Tape<float>&, ParamVars<float>, const ModelConfig&, const MaskedBatch&, Rng*);
template ad::Var<double> mlm_batch_loss(ad::Tape<double>&, ParamVars<double>, const ModelConfig&, const MaskedBatch&,
                                        Rng*);

void TrainSchedule::validate() const {
  if (!(peak_lr > 0.0)) throw std::invalid_argument("peak_lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(epochs > 0.0)) throw std::invalid_argument("epochs must be positive");
  if (!(checkpoint_interval_epochs > 0.0 && checkpoint_interval_epochs <= epochs)) {
    throw std::invalid_argument("checkpoint interval must lie in (0, epochs]");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  masking.validate();
}

double lr_at(std::uint64_t step, const TrainSchedule& schedule) {
  if (schedule.warmup_steps == 0 || step >= schedule.warmup_steps) return schedule.peak_lr;
  return schedule.peak_lr * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
}

std::vector<bool> weight_decay_mask(const EncoderParameters& params) {
  std::vector<bool> mask;
  mask.reserve(params.tensors.size());
  const auto layout = params.layout();
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    mask.push_back(params.tensors[i].value.rank() == 2 && !layout.is_embedding(i));
  }
  return mask;
}

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

// Batches for one epoch: a seeded permutation with the partial tail dropped,
// bucketed by length inside windows of 8 batches, then the batch order shuffled.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const TokenSequence> data, std::size_t batch_size,
                                                    Rng& rng) {
  auto order = permutation(data.size(), rng);
  order.resize(data.size() / batch_size * batch_size);
  const std::size_t window = batch_size * 8;
  for (std::size_t start = 0; start < order.size(); start += window) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + window));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) { return data[a].size() < data[b].size(); });
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  }
  const auto shuffle = permutation(batches.size(), rng);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batches.size());
  for (auto i : shuffle) out.push_back(std::move(batches[i]));
  return out;
}

EncoderParameters with_values(const EncoderParameters& shape_source, const std::vector<Tensor<float>>& weights) {
  EncoderParameters p;
  p.config = shape_source.config;
  p.tensors.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) p.tensors.push_back({shape_source.tensors[i].name, weights[i]});
  return p;
}

}  // namespace

TrainResult train(ModelConfig config, const TrainSchedule& schedule, std::span<const TokenSequence> train_set,
                  std::uint64_t seed, const CheckpointSink& sink, const TrainOptions& options) {
  schedule.validate();
  config.dropout_rate = schedule.dropout;
  config.validate();
  const std::size_t steps_per_epoch = train_set.size() / schedule.batch_size;
  if (steps_per_epoch == 0) {
    throw std::invalid_argument("training corpus (" + std::to_string(train_set.size()) +
                                " sequences) is smaller than one batch of " + std::to_string(schedule.batch_size));
  }
  const double n_intervals_real = schedule.epochs / schedule.checkpoint_interval_epochs;
  const auto n_intervals = static_cast<std::uint64_t>(std::llround(n_intervals_real));
  if (std::abs(n_intervals_real - static_cast<double>(n_intervals)) > 1e-9) {
    throw std::invalid_argument("epochs must be a whole multiple of the checkpoint interval");
  }
  if (schedule.checkpoint_interval_epochs * static_cast<double>(steps_per_epoch) < 1.0) {
    throw std::invalid_argument("checkpoint interval is shorter than one optimizer step");
  }
  auto boundary_step = [&](std::uint64_t k) {
    return static_cast<std::uint64_t>(std::llround(static_cast<double>(k) * schedule.checkpoint_interval_epochs *
                                                   static_cast<double>(steps_per_epoch)));
  };
  const std::uint64_t total_steps = boundary_step(n_intervals);
  for (const auto& s : train_set) {
    if (s.size() + 2 > config.max_len) {
      throw std::invalid_argument("training sequence of " + std::to_string(s.size()) +
                                  " tokens does not fit max_len " + std::to_string(config.max_len));
    }
  }

  const EncoderParameters initial = init_model(config, seed);
  std::vector<Tensor<float>> weights;
  for (const auto& t : initial.tensors) weights.push_back(t.value);
  AdamW optimizer({schedule.beta1, schedule.beta2, schedule.adam_eps, schedule.weight_decay},
                  weight_decay_mask(initial));
  const std::string chash = config_hash(config);

  TrainResult result;
  std::uint64_t tokens_seen = 0;
  auto emit = [&](std::uint64_t step, double epoch_fraction) {
    Checkpoint ck{with_values(initial, weights), {}};
    ck.meta.run_id = options.run_id;
    ck.meta.step = step;
    ck.meta.epoch_fraction = epoch_fraction;
    ck.meta.tokens_seen = tokens_seen;
    ck.meta.wall_clock = options.wall_clock;
    ck.meta.rng_digest = sha256_hex("seed=" + std::to_string(seed) + ";step=" + std::to_string(step)).substr(0, 16);
    ck.meta.config_hash = chash;
    result.checkpoints.push_back(ck.meta);
    if (sink) sink(ck);
  };
  if (schedule.save_step0) emit(0, 0.0);

  std::uint64_t step = 0;
  std::uint64_t next_boundary = 1;
  for (std::uint64_t epoch = 0; step < total_steps; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, "shuffle", epoch));
    const auto batches = epoch_batches(train_set, schedule.batch_size, shuffle_rng);
    for (const auto& idx : batches) {
      if (step >= total_steps) break;
      std::vector<std::vector<TokenId>> contents;
      std::vector<Rng> rngs;
      const std::uint64_t mask_seed = derive_seed(seed, "mask", step);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        contents.push_back(train_set[idx[i]].ids);
        rngs.emplace_back(derive_seed(mask_seed, "seq", i));
        tokens_seen += train_set[idx[i]].size();
      }
      const auto mb = make_masked_batch(contents, schedule.masking, config.vocab_size, rngs);

      ad::Tape<float> tape;
      tape.set_training(true);
      std::vector<ad::Var<float>> leaves;
      leaves.reserve(weights.size());
      for (const auto& w : weights) leaves.push_back(tape.leaf(w));
      Rng dropout_rng(derive_seed(seed, "dropout", step));
      auto loss = mlm_batch_loss<float>(tape, leaves, config, mb, &dropout_rng);
      const double loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) {
        Checkpoint diag{with_values(initial, weights), {}};
        diag.meta.run_id = options.run_id + "-diverged";
        diag.meta.step = step;
        diag.meta.epoch_fraction = static_cast<double>(step) / static_cast<double>(steps_per_epoch);
        diag.meta.tokens_seen = tokens_seen;
        diag.meta.wall_clock = options.wall_clock;
        diag.meta.config_hash = chash;
        throw NonFiniteLoss("non-finite training loss at step " + std::to_string(step), std::move(diag));
      }
      auto grads = tape.gradients(loss, leaves);
      std::vector<Tensor<float>> grad_values;
      grad_values.reserve(grads.size());
      for (const auto& g : grads) grad_values.push_back(g.value());

      ++step;
      const double lr = lr_at(step, schedule);
      optimizer.step(weights, grad_values, lr);
      const double epoch_fraction = static_cast<double>(step) / static_cast<double>(steps_per_epoch);
      result.log.push_back({step, epoch_fraction, loss_value, lr});

      if (next_boundary <= n_intervals && step == boundary_step(next_boundary)) {
        emit(step, static_cast<double>(next_boundary) * schedule.checkpoint_interval_epochs);
        ++next_boundary;
      }
    }
  }
  result.final_params = with_values(initial, weights);
  return result;
}

double eval_pretrain_loss(const EncoderParameters& params, std::span<const TokenSequence> validation,
                          std::uint64_t eval_seed, const MaskingPolicy& policy, std::size_t batch_size) {
  if (validation.empty()) throw std::invalid_argument("empty evaluation set");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < validation.size(); start += batch_size) {
    const std::size_t end = std::min(validation.size(), start + batch_size);
    std::vector<std::vector<TokenId>> contents;
    std::vector<Rng> rngs;
    for (std::size_t i = start; i < end; ++i) {
      contents.push_back(validation[i].ids);
      rngs.emplace_back(derive_seed(eval_seed, "eval", i));
    }
    const auto mb = make_masked_batch(contents, policy, params.config.vocab_size, rngs);
    ad::Tape<float> tape;
    std::vector<ad::Var<float>> leaves;
    for (const auto& t : params.tensors) leaves.push_back(tape.constant(t.value));
    auto hidden = encode<float>(tape, leaves, params.config, mb.batch);
    auto logits = mlm_logits<float>(leaves, params.config, hidden, mb.rows);
    auto ce = ad::cross_entropy_rows(logits, std::span<const std::int32_t>(mb.targets));
    for (float v : ce.value().data) total += v;
    count += mb.targets.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace clm
