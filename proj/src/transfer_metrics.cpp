#include "clm/transfer_metrics.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "clm/csv.hpp"
#include "clm/rng.hpp"

namespace clm {

void HutchinsonConfig::validate() const {
  if (minibatch_size == 0) throw std::invalid_argument("hutchinson minibatch_size must be positive");
  if (n_sequences < minibatch_size) throw std::invalid_argument("hutchinson n_sequences must be >= minibatch_size");
}

namespace {

using FullLoss = std::function<ad::Var<double>(ad::Tape<double>&, std::span<const ad::Var<double>>)>;

// Parameters split into the differentiated encoder part and fixed tensors.
struct Restricted {
  std::shared_ptr<const std::vector<Tensor<double>>> all;
  std::vector<std::size_t> wrt;
  std::vector<Tensor<double>> free;

  explicit Restricted(const EncoderParameters& params)
      : all(std::make_shared<const std::vector<Tensor<double>>>(params.as<double>())),
        wrt(params.encoder_indices()) {
    for (auto i : wrt) free.push_back((*all)[i]);
  }

  // Loss over the free tensors; everything else enters as constants.
  ad::LossFn<double> bind(FullLoss body) const {
    return [all = all, wrt = wrt, body = std::move(body)](ad::Tape<double>& tape,
                                                           std::span<const ad::Var<double>> vars) {
      std::vector<ad::Var<double>> full(all->size());
      std::size_t next = 0;
      for (std::size_t i = 0; i < full.size(); ++i) {
        if (next < wrt.size() && wrt[next] == i) full[i] = vars[next++];
        else full[i] = tape.constant((*all)[i]);
      }
      return body(tape, full);
    };
  }
};

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(count);
  return idx;
}

// Masked MLM batch over data[picks], sequence j masked from (seed, stream, salt + j).
MaskedBatch masked_pick(std::span<const TokenSequence> data, std::span<const std::size_t> picks,
                        const MaskingPolicy& policy, std::size_t vocab, std::uint64_t seed, std::string_view stream,
                        std::size_t salt) {
  std::vector<std::vector<TokenId>> contents;
  std::vector<Rng> rngs;
  for (std::size_t j = 0; j < picks.size(); ++j) {
    contents.push_back(data[picks[j]].ids);
    rngs.emplace_back(derive_seed(seed, stream, salt + j));
  }
  return make_masked_batch(contents, policy, vocab, rngs);
}

void require_finite(std::span<const double> g, const std::string& what) {
  for (double v : g) {
    if (!std::isfinite(v)) throw std::runtime_error("non-finite " + what);
  }
}

}  // namespace

double hutchinson_trace(const BatchLoss& loss_for, std::span<const Tensor<double>> params, std::size_t n_probes,
                        std::uint64_t seed) {
  if (n_probes == 0) throw std::invalid_argument("hutchinson needs at least one probe");
  std::size_t dim = 0;
  for (const auto& p : params) dim += p.numel();
  double acc = 0.0;
  std::vector<double> v(dim);
  for (std::size_t k = 0; k < n_probes; ++k) {
    Rng rng(derive_seed(seed, "hutchinson-probe", k));
    for (auto& x : v) x = rng.normal();
    const auto hv = ad::hvp_flat<double>(loss_for(k), params, v);
    const double q = std::inner_product(v.begin(), v.end(), hv.begin(), 0.0);
    if (!std::isfinite(q)) throw std::runtime_error("non-finite v'Hv at probe " + std::to_string(k));
    acc += q;
  }
  return acc / static_cast<double>(n_probes);
}

double hessian_trace(const EncoderParameters& params, std::span<const TokenSequence> data,
                     const HutchinsonConfig& config, const MaskingPolicy& policy) {
  config.validate();
  if (data.size() < config.n_sequences) {
    throw std::invalid_argument("hessian_trace needs " + std::to_string(config.n_sequences) + " sequences, got " +
                                std::to_string(data.size()));
  }
  Rng pick_rng(derive_seed(config.seed, "hutchinson-sample"));
  const auto picks = sample_without_replacement(data.size(), config.n_sequences, pick_rng);
  const Restricted r(params);
  const ModelConfig model = params.config;
  const std::size_t vocab = model.vocab_size;
  BatchLoss loss_for = [&](std::size_t k) {
    const std::size_t start = k * config.minibatch_size;
    const std::size_t len = std::min(config.minibatch_size, picks.size() - start);
    auto mb = std::make_shared<MaskedBatch>(masked_pick(data, std::span(picks).subspan(start, len), policy, vocab,
                                                        config.seed, "hutchinson-mask", start));
    return r.bind([mb, model](ad::Tape<double>& tape, std::span<const ad::Var<double>> full) {
      return mlm_batch_loss<double>(tape, full, model, *mb);
    });
  };
  return hutchinson_trace(loss_for, r.free, config.probes(), config.seed);
}

PrincipalGradient principal_gradient(const BatchLoss& loss_for, std::span<const Tensor<double>> params,
                                     std::size_t K, std::string task) {
  if (K == 0) throw std::invalid_argument("principal_gradient needs K >= 1");
  PrincipalGradient pg{std::move(task), K, {}};
  for (const auto& p : params) pg.g.resize(pg.g.size() + p.numel(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const auto grads = ad::gradient<double>(loss_for(k), params);
    std::size_t off = 0;
    for (const auto& t : grads) {
      for (double x : t.data) pg.g[off++] += x;
    }
  }
  for (auto& x : pg.g) x /= static_cast<double>(K);
  require_finite(pg.g, "principal gradient" + (pg.task.empty() ? std::string() : " for " + pg.task));
  return pg;
}

PrincipalGradient mlm_principal_gradient(const EncoderParameters& params, std::span<const TokenSequence> data,
                                         std::size_t K, std::size_t minibatch_size, std::uint64_t seed,
                                         const MaskingPolicy& policy) {
  if (minibatch_size == 0 || data.size() < minibatch_size) {
    throw std::invalid_argument("mlm_principal_gradient: minibatch of " + std::to_string(minibatch_size) +
                                " from " + std::to_string(data.size()) + " sequences");
  }
  const Restricted r(params);
  const ModelConfig model = params.config;
  BatchLoss loss_for = [&](std::size_t k) {
    Rng rng(derive_seed(seed, "pgm-mlm-batch", k));
    const auto picks = sample_without_replacement(data.size(), minibatch_size, rng);
    auto mb = std::make_shared<MaskedBatch>(
        masked_pick(data, picks, policy, model.vocab_size, derive_seed(seed, "pgm-mlm-mask", k), "seq", 0));
    return r.bind([mb, model](ad::Tape<double>& tape, std::span<const ad::Var<double>> full) {
      return mlm_batch_loss<double>(tape, full, model, *mb);
    });
  };
  return principal_gradient(loss_for, r.free, K, "mlm");
}

PrincipalGradient task_principal_gradient(const EncoderParameters& params, const Vocabulary& vocab,
                                          const DownstreamTask& task, std::size_t K, std::uint64_t seed,
                                          std::size_t minibatch_size) {
  task.validate();
  const auto& train = task.splits.train;
  const std::size_t mb_size = std::min(train.size(), minibatch_size ? minibatch_size : batch_size_rule(train.size()));
  const ModelConfig model = params.config;
  const auto ids = std::make_shared<const std::vector<std::vector<TokenId>>>(task_token_ids(task, vocab, model.max_len));
  const std::size_t k_out = task.n_targets();
  const LinearHead head = init_head(model.d_model, k_out, derive_seed(seed, "pgm-head"));
  const auto norm = task.kind == TaskKind::regression ? TargetNormalizer::fit(task, train)
                                                      : TargetNormalizer::identity(k_out);
  const Restricted r(params);
  BatchLoss loss_for = [&](std::size_t k) {
    Rng rng(derive_seed(seed, "pgm-task-batch", k));
    auto picks = sample_without_replacement(train.size(), mb_size, rng);
    for (auto& p : picks) p = train[p];
    std::vector<std::vector<TokenId>> seqs;
    std::vector<double> y;
    std::vector<std::uint8_t> obs;
    for (auto i : picks) {
      seqs.push_back((*ids)[i]);
      for (std::size_t t = 0; t < k_out; ++t) {
        const double v = task.label(i, t);
        obs.push_back(std::isnan(v) ? 0 : 1);
        y.push_back(std::isnan(v) ? 0.0 : norm.normalize(v, t));
      }
    }
    auto batch = std::make_shared<const Batch>(make_batch(seqs));
    const auto kind = task.kind;
    return r.bind([=](ad::Tape<double>& tape, std::span<const ad::Var<double>> full) {
      auto hidden = encode<double>(tape, full, model, *batch);
      auto pooled = pooler<double>(full, model, pool_bos(hidden, *batch));
      auto w = tape.constant(head.weight.cast<double>());
      auto b = tape.constant(head.bias.cast<double>());
      auto out = ad::add_row(ad::matmul(pooled, w), b);
      return multitask_loss<double>(out, y, obs, kind);
    });
  };
  return principal_gradient(loss_for, r.free, K, task.name);
}

double pgm_distance(std::span<const double> s, std::span<const double> t) {
  if (s.size() != t.size()) {
    throw std::invalid_argument("pgm_distance: dimensions " + std::to_string(s.size()) + " and " +
                                std::to_string(t.size()));
  }
  double ns = 0, nt = 0, nd = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    ns += s[i] * s[i];
    nt += t[i] * t[i];
    nd += (t[i] - s[i]) * (t[i] - s[i]);
  }
  if (ns == 0.0 || nt == 0.0) throw std::invalid_argument("pgm_distance: zero-norm gradient");
  return std::sqrt(nd) / (std::sqrt(ns) * std::sqrt(nt));
}

double pgm_distance(const PrincipalGradient& source, const PrincipalGradient& target) {
  return pgm_distance(source.g, target.g);
}

double zero_shot_downstream_loss(const EncoderParameters& params, const Vocabulary& vocab,
                                 std::span<const std::string> smiles, std::uint64_t eval_seed,
                                 const MaskingPolicy& policy) {
  if (smiles.empty()) throw std::invalid_argument("zero_shot_downstream_loss: no inputs");
  std::vector<TokenSequence> seqs;
  for (const auto& s : smiles) {
    auto t = tokenize(s, vocab);
    if (t.ids.size() + 2 > params.config.max_len) t.ids.resize(params.config.max_len - 2);
    seqs.push_back(std::move(t));
  }
  return eval_pretrain_loss(params, seqs, eval_seed, policy);
}

void MetricRecord::validate() const {
  auto check = [&](double v, const std::string& field) {
    if (!std::isfinite(v)) throw std::invalid_argument("metric record " + checkpoint_id + ": " + field + " is not finite");
  };
  check(epoch_fraction, "epoch_fraction");
  check(l_pre, "l_pre");
  check(tr_h, "tr_h");
  for (const auto& [name, m] : tasks) {
    check(m.l_down, name + ".l_down");
    check(m.pgm, name + ".pgm");
    for (const auto& s : m.scores) check(s.value, name + "." + s.mode + "." + std::to_string(s.seed));
  }
}

std::vector<std::vector<std::string>> metric_rows(const MetricRecord& rec) {
  rec.validate();
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, m] : rec.tasks) {
    for (const auto& s : m.scores) {
      rows.push_back({rec.checkpoint_id, format_number(rec.epoch_fraction), format_number(rec.l_pre), name,
                      format_number(m.l_down), s.mode, std::to_string(s.seed), s.metric_name,
                      format_number(s.value), format_number(rec.tr_h), format_number(m.pgm)});
    }
  }
  return rows;
}

}  // namespace clm
