#include "clm/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "clm/csv.hpp"
#include "clm/optimizer.hpp"
#include "clm/pretrain.hpp"
#include "clm/rng.hpp"

namespace clm {

namespace {
constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
}

std::string to_string(TaskKind k) { return k == TaskKind::classification ? "classification" : "regression"; }

std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::roc_auc: return "roc_auc";
    case MetricKind::mae: return "mae";
    case MetricKind::rmse: return "rmse";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

MetricKind parse_metric_kind(std::string_view s) {
  if (s == "roc_auc") return MetricKind::roc_auc;
  if (s == "mae") return MetricKind::mae;
  if (s == "rmse") return MetricKind::rmse;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

void DownstreamTask::validate() const {
  if (target_names.empty()) throw std::invalid_argument("task " + name + " has no targets");
  if (labels.size() != smiles.size() * n_targets()) throw std::invalid_argument("task " + name + ": label grid size");
  if ((kind == TaskKind::classification) != (metric == MetricKind::roc_auc)) {
    throw std::invalid_argument("task " + name + ": roc_auc goes with classification, mae/rmse with regression");
  }
  for (double y : labels) {
    if (std::isnan(y)) continue;
    if (!std::isfinite(y)) throw std::invalid_argument("task " + name + ": non-finite label");
    if (kind == TaskKind::classification && y != 0.0 && y != 1.0) {
      throw std::invalid_argument("task " + name + ": classification labels must be 0 or 1");
    }
  }
  std::vector<int> seen(n_samples(), 0);
  for (const auto* part : {&splits.train, &splits.valid, &splits.test}) {
    for (auto i : *part) {
      if (i >= n_samples() || seen[i]++) throw std::invalid_argument("task " + name + ": splits overlap or overflow");
    }
  }
  if (splits.train.empty() || splits.valid.empty() || splits.test.empty()) {
    throw std::invalid_argument("task " + name + " needs non-empty train, valid and test splits");
  }
}

DownstreamTask parse_task_csv(std::string_view text, std::string name, std::optional<TaskKind> kind,
                              std::optional<MetricKind> metric) {
  const CsvTable table = parse_csv(text);
  if (table.header.size() < 3 || table.header[0] != "smiles" || table.header[1] != "split") {
    throw std::invalid_argument("task file header must be smiles,split,<targets...>");
  }
  DownstreamTask task;
  task.name = std::move(name);
  task.target_names.assign(table.header.begin() + 2, table.header.end());
  bool all_binary = true;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::size_t i = task.smiles.size();
    task.smiles.push_back(row[0]);
    if (row[1] == "train") task.splits.train.push_back(i);
    else if (row[1] == "valid") task.splits.valid.push_back(i);
    else if (row[1] == "test") task.splits.test.push_back(i);
    else throw std::invalid_argument("row " + std::to_string(r + 2) + ": split must be train, valid or test");
    for (std::size_t t = 2; t < row.size(); ++t) {
      if (row[t].empty()) {
        task.labels.push_back(kMissing);
        continue;
      }
      std::size_t used = 0;
      double y = 0;
      try {
        y = std::stod(row[t], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != row[t].size()) {
        throw std::invalid_argument("row " + std::to_string(r + 2) + ": label '" + row[t] + "' is not a number");
      }
      all_binary = all_binary && (y == 0.0 || y == 1.0);
      task.labels.push_back(y);
    }
  }
  task.kind = kind.value_or(all_binary ? TaskKind::classification : TaskKind::regression);
  task.metric = metric.value_or(task.kind == TaskKind::classification ? MetricKind::roc_auc : MetricKind::rmse);
  task.validate();
  return task;
}

DownstreamTask load_task_csv(const std::filesystem::path& path, std::optional<TaskKind> kind,
                             std::optional<MetricKind> metric) {
  const CsvTable t = read_csv(path);
  // Re-serializing is wasteful but keeps one parsing path.
  CsvWriter w(t.header);
  for (const auto& r : t.rows) w.add(r);
  return parse_task_csv(w.str(), path.stem().string(), kind, metric);
}

TargetNormalizer TargetNormalizer::fit(const DownstreamTask& task, std::span<const std::size_t> rows) {
  TargetNormalizer n;
  for (std::size_t t = 0; t < task.n_targets(); ++t) {
    double sum = 0;
    std::size_t count = 0;
    for (auto i : rows) {
      if (!std::isnan(task.label(i, t))) {
        sum += task.label(i, t);
        ++count;
      }
    }
    if (count < 2) throw std::invalid_argument("target " + task.target_names[t] + " needs two observed training labels");
    const double mean = sum / static_cast<double>(count);
    double ss = 0;
    for (auto i : rows) {
      if (!std::isnan(task.label(i, t))) ss += (task.label(i, t) - mean) * (task.label(i, t) - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(count));
    if (!(sd > 0)) throw std::invalid_argument("target " + task.target_names[t] + " is constant on the training split");
    n.mean.push_back(mean);
    n.stddev.push_back(sd);
  }
  return n;
}

TargetNormalizer TargetNormalizer::identity(std::size_t n_targets) {
  return {std::vector<double>(n_targets, 0.0), std::vector<double>(n_targets, 1.0)};
}

std::size_t batch_size_rule(std::size_t n) {
  if (n <= 1000) return 32;
  if (n <= 5000) return 256;
  return 512;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: scores and labels differ in length");
  // Sort once, assign average ranks to tied groups, then apply the rank-sum form.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      const int l = labels[order[k]];
      if (l != 0 && l != 1) throw std::invalid_argument("roc_auc: labels must be 0 or 1");
      if (l == 1) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc needs both classes");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1) / 2) / (np * nn);
}

namespace {

template <class F>
double paired_error(std::span<const double> pred, std::span<const double> y, const char* name, F&& finish) {
  if (pred.size() != y.size()) throw std::invalid_argument(std::string(name) + ": length mismatch");
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (std::isnan(y[i]) || std::isnan(pred[i])) continue;
    acc += finish.first(pred[i] - y[i]);
    ++n;
  }
  if (n == 0) throw std::invalid_argument(std::string(name) + ": no observed pairs");
  return finish.second(acc / static_cast<double>(n));
}

}  // namespace

double mae(std::span<const double> pred, std::span<const double> y) {
  auto f = std::make_pair([](double e) { return std::abs(e); }, [](double m) { return m; });
  return paired_error(pred, y, "mae", f);
}

double rmse(std::span<const double> pred, std::span<const double> y) {
  auto f = std::make_pair([](double e) { return e * e; }, [](double m) { return std::sqrt(m); });
  return paired_error(pred, y, "rmse", f);
}

template <class Real>
ad::Var<Real> multitask_loss(const ad::Var<Real>& outputs, std::span<const double> labels,
                             std::span<const std::uint8_t> observed, TaskKind kind) {
  const std::size_t cells = outputs.numel();
  if (labels.size() != cells || observed.size() != cells) {
    throw ad::ShapeError("multitask_loss: labels/mask do not match outputs " + shape_str(outputs.shape()));
  }
  std::vector<std::int32_t> rows;
  for (std::size_t i = 0; i < cells; ++i) {
    if (observed[i]) rows.push_back(static_cast<std::int32_t>(i));
  }
  if (rows.empty()) throw std::invalid_argument("multitask_loss: no observed labels in batch");
  auto& tape = outputs.tape();
  auto picked = ad::embedding(ad::reshape(outputs, {cells, 1}), std::span<const std::int32_t>(rows));  // [n, 1]
  if (kind == TaskKind::classification) {
    // Rows [0, z] through log-softmax give log(1 - sigmoid z) and log sigmoid z.
    auto pair = ad::matmul(picked, tape.constant(Tensor<Real>({1, 2}, {Real(0), Real(1)})));
    std::vector<std::int32_t> targets;
    for (auto r : rows) targets.push_back(labels[static_cast<std::size_t>(r)] != 0.0 ? 1 : 0);
    return ad::cross_entropy(pair, std::span<const std::int32_t>(targets));
  }
  Tensor<Real> y({rows.size(), 1});
  for (std::size_t k = 0; k < rows.size(); ++k) y.data[k] = static_cast<Real>(labels[static_cast<std::size_t>(rows[k])]);
  auto diff = ad::sub(picked, tape.constant(std::move(y)));
  return ad::mean(ad::mul(diff, diff));
}

template ad::Var<float> multitask_loss(const ad::Var<float>&, std::span<const double>, std::span<const std::uint8_t>,
                                       TaskKind);
template ad::Var<double> multitask_loss(const ad::Var<double>&, std::span<const double>,
                                        std::span<const std::uint8_t>, TaskKind);

LinearHead init_head(std::size_t d, std::size_t k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "head"));
  LinearHead h{Tensor<float>({d, k}), Tensor<float>({k})};
  for (auto& w : h.weight.data) w = static_cast<float>(rng.truncated_normal(0.02));
  return h;
}

std::vector<std::vector<TokenId>> task_token_ids(const DownstreamTask& task, const Vocabulary& vocab,
                                                 std::size_t max_len) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(task.n_samples());
  for (const auto& s : task.smiles) {
    auto ids = tokenize(s, vocab).ids;
    if (ids.size() + 2 > max_len) ids.resize(max_len - 2);
    out.push_back(std::move(ids));
  }
  return out;
}

SeedSummary summarize_seeds(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize_seeds: no values");
  SeedSummary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

// Builds outputs [rows, k] for the given sample indices.
using ForwardFn = std::function<ad::Var<float>(ad::Tape<float>&, std::span<const ad::Var<float>>,
                                               std::span<const std::size_t>, Rng*)>;

double cell_loss(double z, double y, TaskKind kind) {
  if (kind == TaskKind::regression) return (z - y) * (z - y);
  // Stable sigmoid cross-entropy: softplus(z) - y z.
  const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
  return softplus - y * z;
}

class TransferRun {
 public:
  TransferRun(const DownstreamTask& task, std::vector<Tensor<float>> weights, std::vector<bool> decay,
              ForwardFn forward, std::uint64_t seed, const TransferOptions& options)
      : task_(task),
        weights_(std::move(weights)),
        decay_(std::move(decay)),
        forward_(std::move(forward)),
        seed_(seed),
        opt_(options) {
    task_.validate();
    norm_ = task.kind == TaskKind::regression ? TargetNormalizer::fit(task, task.splits.train)
                                              : TargetNormalizer::identity(task.n_targets());
    const std::size_t k = task.n_targets();
    z_labels_.resize(task.labels.size());
    observed_.resize(task.labels.size());
    for (std::size_t i = 0; i < task.n_samples(); ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        const double y = task.label(i, t);
        observed_[i * k + t] = std::isnan(y) ? 0 : 1;
        z_labels_[i * k + t] = std::isnan(y) ? 0.0 : norm_.normalize(y, t);
      }
    }
    batch_ = opt_.batch_size ? opt_.batch_size : batch_size_rule(task.splits.train.size());
  }

  // Returns the best weights and fills the bookkeeping fields of `result`.
  std::vector<Tensor<float>> run(TransferResult& result) {
    const auto& train = task_.splits.train;
    const std::size_t steps_per_epoch = (train.size() + batch_ - 1) / batch_;
    const double total_steps = static_cast<double>(opt_.max_epochs * steps_per_epoch);
    AdamW adam({opt_.beta1, opt_.beta2, opt_.adam_eps, opt_.weight_decay}, decay_);

    std::vector<Tensor<float>> best = weights_;
    double best_loss = valid_loss(weights_);
    std::size_t best_epoch = 0, since_best = 0, epoch = 0;
    std::uint64_t step = 0;
    for (epoch = 1; epoch <= opt_.max_epochs && since_best < opt_.patience; ++epoch) {
      Rng shuffle(derive_seed(seed_, "transfer-shuffle", epoch));
      std::vector<std::size_t> order(train.begin(), train.end());
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      for (std::size_t start = 0; start < order.size(); start += batch_) {
        const std::span<const std::size_t> rows(order.data() + start, std::min(batch_, order.size() - start));
        std::vector<double> y;
        std::vector<std::uint8_t> mask;
        gather(rows, y, mask);
        if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) continue;
        ad::Tape<float> tape;
        tape.set_training(true);
        std::vector<ad::Var<float>> vars;
        for (const auto& w : weights_) vars.push_back(tape.leaf(w));
        Rng dropout(derive_seed(seed_, "transfer-dropout", step));
        auto out = forward_(tape, vars, rows, &dropout);
        auto loss = multitask_loss(out, y, mask, task_.kind);
        if (!std::isfinite(loss.value().item())) {
          throw std::runtime_error("non-finite downstream loss on task " + task_.name + " at epoch " +
                                   std::to_string(epoch));
        }
        auto grads = tape.gradients(loss, vars);
        std::vector<Tensor<float>> g;
        for (const auto& v : grads) g.push_back(v.value());
        const double lr = opt_.lr * std::max(0.0, 1.0 - static_cast<double>(step) / total_steps);
        adam.step(weights_, g, lr);
        ++step;
      }
      const double vl = valid_loss(weights_);
      if (vl < best_loss) {
        best_loss = vl;
        best = weights_;
        best_epoch = epoch;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    result.best_valid_loss = best_loss;
    result.best_epoch = best_epoch;
    result.epochs_run = epoch - 1;
    score(best, result);
    return best;
  }

 private:
  void gather(std::span<const std::size_t> rows, std::vector<double>& y, std::vector<std::uint8_t>& mask) const {
    const std::size_t k = task_.n_targets();
    for (auto i : rows) {
      for (std::size_t t = 0; t < k; ++t) {
        y.push_back(z_labels_[i * k + t]);
        mask.push_back(observed_[i * k + t]);
      }
    }
  }

  // Model outputs (normalized scale) for `rows`, evaluation mode.
  std::vector<double> predict(const std::vector<Tensor<float>>& weights, std::span<const std::size_t> rows) const {
    std::vector<double> out;
    for (std::size_t start = 0; start < rows.size(); start += batch_) {
      const auto chunk = rows.subspan(start, std::min(batch_, rows.size() - start));
      ad::Tape<float> tape;
      std::vector<ad::Var<float>> vars;
      for (const auto& w : weights) vars.push_back(tape.constant(w));
      auto o = forward_(tape, vars, chunk, nullptr);
      out.insert(out.end(), o.value().data.begin(), o.value().data.end());
    }
    return out;
  }

  double valid_loss(const std::vector<Tensor<float>>& weights) const {
    const auto& rows = task_.splits.valid;
    const auto z = predict(weights, rows);
    const std::size_t k = task_.n_targets();
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t cell = rows[r] * k + t;
        if (!observed_[cell]) continue;
        acc += cell_loss(z[r * k + t], z_labels_[cell], task_.kind);
        ++n;
      }
    }
    if (n == 0) throw std::invalid_argument("task " + task_.name + " has no observed validation labels");
    return acc / static_cast<double>(n);
  }

  void score(const std::vector<Tensor<float>>& weights, TransferResult& result) const {
    const auto& rows = task_.splits.test;
    const auto z = predict(weights, rows);
    const std::size_t k = task_.n_targets();
    result.metric_name = to_string(task_.metric);
    result.per_target.assign(k, kMissing);
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t t = 0; t < k; ++t) {
      std::vector<double> pred, truth;
      std::vector<int> cls;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const double y = task_.label(rows[r], t);
        if (std::isnan(y)) continue;
        pred.push_back(task_.kind == TaskKind::regression ? norm_.denormalize(z[r * k + t], t) : z[r * k + t]);
        truth.push_back(y);
        cls.push_back(y != 0.0 ? 1 : 0);
      }
      double m = kMissing;
      if (task_.metric == MetricKind::roc_auc) {
        const auto pos = std::count(cls.begin(), cls.end(), 1);
        if (pos > 0 && pos < static_cast<std::ptrdiff_t>(cls.size())) m = roc_auc(pred, cls);
      } else if (!pred.empty()) {
        m = task_.metric == MetricKind::mae ? mae(pred, truth) : rmse(pred, truth);
      }
      result.per_target[t] = m;
      if (!std::isnan(m)) {
        sum += m;
        ++used;
      }
    }
    if (used == 0) throw std::invalid_argument("task " + task_.name + ": no target can be scored on the test split");
    result.metric = sum / static_cast<double>(used);
  }

  const DownstreamTask& task_;
  std::vector<Tensor<float>> weights_;
  std::vector<bool> decay_;
  ForwardFn forward_;
  std::uint64_t seed_;
  TransferOptions opt_;
  TargetNormalizer norm_;
  std::vector<double> z_labels_;
  std::vector<std::uint8_t> observed_;
  std::size_t batch_ = 32;
};

ad::Var<float> head_forward(const ad::Var<float>& x, const ad::Var<float>& w, const ad::Var<float>& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

}  // namespace

TransferResult finetune(const EncoderParameters& encoder, const Vocabulary& vocab, const DownstreamTask& task,
                        std::uint64_t seed, const TransferOptions& options) {
  const ModelConfig config = encoder.config;
  const auto ids = task_token_ids(task, vocab, config.max_len);
  const std::size_t n_enc = encoder.tensors.size();
  const LinearHead head0 = init_head(config.d_model, task.n_targets(), seed);

  std::vector<Tensor<float>> weights;
  for (const auto& t : encoder.tensors) weights.push_back(t.value);
  weights.push_back(head0.weight);
  weights.push_back(head0.bias);
  auto decay = weight_decay_mask(encoder);
  decay.push_back(true);
  decay.push_back(false);

  ForwardFn forward = [&, n_enc](ad::Tape<float>& tape, std::span<const ad::Var<float>> vars,
                                 std::span<const std::size_t> rows, Rng* dropout) {
    std::vector<std::vector<TokenId>> seqs;
    for (auto r : rows) seqs.push_back(ids[r]);
    const Batch batch = make_batch(seqs);
    const auto enc = vars.first(n_enc);
    auto hidden = encode<float>(tape, enc, config, batch, dropout);
    auto pooled = pooler<float>(enc, config, pool_bos(hidden, batch));
    return head_forward(pooled, vars[n_enc], vars[n_enc + 1]);
  };

  TransferResult result;
  TransferRun run(task, std::move(weights), std::move(decay), forward, seed, options);
  auto best = run.run(result);
  result.encoder = encoder;
  for (std::size_t i = 0; i < n_enc; ++i) result.encoder.tensors[i].value = std::move(best[i]);
  result.head = {std::move(best[n_enc]), std::move(best[n_enc + 1])};
  return result;
}

TransferResult probe_on_features(const Tensor<float>& features, const DownstreamTask& task, std::uint64_t seed,
                                 const TransferOptions& options) {
  if (features.rank() != 2 || features.rows() != task.n_samples()) {
    throw ad::ShapeError("probe features " + shape_str(features.shape) + " do not match " +
                         std::to_string(task.n_samples()) + " samples");
  }
  const std::size_t d = features.cols();
  const LinearHead head0 = init_head(d, task.n_targets(), seed);
  ForwardFn forward = [&features, d](ad::Tape<float>& tape, std::span<const ad::Var<float>> vars,
                                     std::span<const std::size_t> rows, Rng*) {
    Tensor<float> x({rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(features.data.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                  x.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return head_forward(tape.constant(std::move(x)), vars[0], vars[1]);
  };
  TransferResult result;
  TransferRun run(task, {head0.weight, head0.bias}, {true, false}, forward, seed, options);
  auto best = run.run(result);
  result.head = {std::move(best[0]), std::move(best[1])};
  return result;
}

TransferResult linear_probe(const EncoderParameters& encoder, const Vocabulary& vocab, const DownstreamTask& task,
                            std::uint64_t seed, const TransferOptions& options) {
  const ModelConfig& config = encoder.config;
  const auto ids = task_token_ids(task, vocab, config.max_len);
  const auto weights = encoder.as<float>();
  // The encoder is frozen and dropout is off, so features are computed once.
  Tensor<float> features({task.n_samples(), config.d_model});
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < ids.size(); start += chunk) {
    const std::size_t end = std::min(ids.size(), start + chunk);
    std::vector<std::vector<TokenId>> seqs(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                           ids.begin() + static_cast<std::ptrdiff_t>(end));
    const Batch batch = make_batch(seqs);
    ad::Tape<float> tape;
    std::vector<ad::Var<float>> vars;
    for (const auto& w : weights) vars.push_back(tape.constant(w));
    auto hidden = encode<float>(tape, vars, config, batch);
    auto pooled = pool_mean(hidden, batch.batch, special_positions(batch));
    std::copy(pooled.value().data.begin(), pooled.value().data.end(),
              features.data.begin() + static_cast<std::ptrdiff_t>(start * config.d_model));
  }
  auto result = probe_on_features(features, task, seed, options);
  result.encoder = encoder;
  return result;
}

}  // namespace clm
