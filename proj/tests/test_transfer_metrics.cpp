#include <gtest/gtest.h>

#include <cmath>

#include "clm/toy_data.hpp"
#include "clm/transfer_metrics.hpp"

using namespace clm;

namespace {

// 0.5 * sum d_i x_i^2
ad::LossFn<double> diag_quadratic(std::vector<double> d) {
  return [d](ad::Tape<double>& tape, std::span<const ad::Var<double>> p) {
    auto dv = tape.constant(Tensor<double>({d.size()}, d));
    return ad::scale(ad::sum(ad::mul(dv, ad::mul(p[0], p[0]))), 0.5);
  };
}

std::vector<Tensor<double>> point(std::vector<double> x) {
  const std::size_t n = x.size();
  return {Tensor<double>({n}, std::move(x))};
}

ModelConfig tiny(std::size_t vocab) {
  ModelConfig c;
  c.d_model = 8;
  c.n_head = 2;
  c.n_layer = 1;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_len = 24;
  return c;
}

struct Corpus {
  Vocabulary vocab;
  std::vector<TokenSequence> seqs;
};

Corpus corpus(std::size_t tokens) {
  Corpus c;
  auto lines = synthetic_corpus(tokens, 4, SmilesGrammar{4, 8});
  c.vocab = build_vocab(lines);
  for (const auto& l : lines) {
    auto t = tokenize(l, c.vocab);
    if (t.size() + 2 <= 24) c.seqs.push_back(std::move(t));
  }
  return c;
}

}  // namespace

TEST(Hutchinson, PlantedQuadratic) {
  const auto params = point({0.3, -1.0, 2.0});
  BatchLoss f = [](std::size_t) { return diag_quadratic({1, 2, 3}); };
  const double est = hutchinson_trace(f, params, 10000, 17);
  EXPECT_NEAR(est, 6.0, 0.3);
}

TEST(Hutchinson, UnbiasedAcrossSeeds) {
  const auto params = point({0, 0, 0});
  BatchLoss f = [](std::size_t) { return diag_quadratic({1, 2, 3}); };
  std::vector<double> est;
  for (std::uint64_t s = 0; s < 1000; ++s) est.push_back(hutchinson_trace(f, params, 100, s));
  double mean = 0, ss = 0;
  for (double e : est) mean += e;
  mean /= est.size();
  for (double e : est) ss += (e - mean) * (e - mean);
  const double se = std::sqrt(ss / (est.size() - 1)) / std::sqrt(double(est.size()));
  EXPECT_LT(std::abs(mean - 6.0), 3 * se);
}

TEST(Hutchinson, LinearLossIsZero) {
  const auto params = point({1, 2, 3});
  BatchLoss f = [](std::size_t) -> ad::LossFn<double> {
    return [](ad::Tape<double>& tape, std::span<const ad::Var<double>> p) {
      return ad::sum(ad::mul(tape.constant(Tensor<double>({3}, {1, -2, 5})), p[0]));
    };
  };
  EXPECT_EQ(hutchinson_trace(f, params, 50, 1), 0.0);
}

TEST(Hutchinson, ConfigProbes) {
  HutchinsonConfig c{2048, 128, 0};
  EXPECT_EQ(c.probes(), 16u);
  c.n_sequences = 2049;
  EXPECT_EQ(c.probes(), 17u);
  c.n_sequences = 100;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(HessianTrace, DeterministicAndDataCheck) {
  auto c = corpus(3000);
  auto params = init_model(tiny(c.vocab.size()), 2);
  HutchinsonConfig cfg{32, 16, 9};
  const double a = hessian_trace(params, c.seqs, cfg);
  const double b = hessian_trace(params, c.seqs, cfg);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(std::isfinite(a));
  cfg.n_sequences = c.seqs.size() + 1;
  EXPECT_THROW(hessian_trace(params, c.seqs, cfg), std::invalid_argument);
}

TEST(PrincipalGradient, QuadraticAndSingleBatch) {
  const auto params = point({0.5, -1.5, 2.0});
  BatchLoss f = [](std::size_t) { return diag_quadratic({4, 4, 4}); };
  auto pg = principal_gradient(f, params, 10);
  ASSERT_EQ(pg.g.size(), 3u);
  EXPECT_NEAR(pg.g[0], 2.0, 1e-6);
  EXPECT_NEAR(pg.g[1], -6.0, 1e-6);
  EXPECT_NEAR(pg.g[2], 8.0, 1e-6);

  BatchLoss varying = [](std::size_t k) { return diag_quadratic({double(k + 1), 1, 1}); };
  auto one = principal_gradient(varying, params, 1);
  EXPECT_EQ(one.g, ad::gradient<double>(varying(0), params)[0].data);
  EXPECT_THROW(principal_gradient(f, params, 0), std::invalid_argument);
}

TEST(PrincipalGradient, EncoderDimension) {
  auto c = corpus(3000);
  auto params = init_model(tiny(c.vocab.size()), 2);
  std::size_t dim = 0;
  for (auto i : params.encoder_indices()) dim += params.tensors[i].value.numel();

  auto src = mlm_principal_gradient(params, c.seqs, 2, 8, 5);
  EXPECT_EQ(src.g.size(), dim);
  EXPECT_EQ(src.g, mlm_principal_gradient(params, c.seqs, 2, 8, 5).g);

  auto task = parse_task_csv(toy_task_csv(toy_classification_task(60, 3), {"y"}), "toy");
  auto tgt = task_principal_gradient(params, c.vocab, task, 2, 5, 8);
  EXPECT_EQ(tgt.g.size(), dim);
  EXPECT_EQ(tgt.g, task_principal_gradient(params, c.vocab, task, 2, 5, 8).g);
  const double d = pgm_distance(src, tgt);
  EXPECT_TRUE(std::isfinite(d));
  EXPECT_GT(d, 0.0);
}

TEST(Pgm, Algebra) {
  std::vector<double> g{0.3, -2.0, 1.0};
  EXPECT_EQ(pgm_distance(g, g), 0.0);
  std::vector<double> e1{1, 0}, e2{0, 1};
  EXPECT_NEAR(pgm_distance(e1, e2), std::sqrt(2.0), 1e-12);
  std::vector<double> two{2, 0};
  EXPECT_NEAR(pgm_distance(two, e2), std::sqrt(5.0) / 2, 1e-12);
  EXPECT_EQ(pgm_distance(two, e2), pgm_distance(e2, two));
  std::vector<double> zero{0, 0};
  EXPECT_THROW(pgm_distance(zero, e1), std::invalid_argument);
  std::vector<double> three{1, 2, 3};
  EXPECT_THROW(pgm_distance(e1, three), std::invalid_argument);
}

TEST(ZeroShot, MatchesPretrainLossOnSameInputs) {
  auto c = corpus(2000);
  auto params = init_model(tiny(c.vocab.size()), 3);
  const auto before = params.flatten();
  std::vector<std::string> smiles;
  for (const auto& s : c.seqs) smiles.push_back(detokenize(s, c.vocab));
  const double l_down = zero_shot_downstream_loss(params, c.vocab, smiles, 12);
  EXPECT_EQ(l_down, eval_pretrain_loss(params, c.seqs, 12));
  EXPECT_EQ(params.flatten(), before);
  EXPECT_THROW(zero_shot_downstream_loss(params, c.vocab, {}, 1), std::invalid_argument);
}

TEST(ZeroShot, UntrainedNearLogVocab) {
  Vocabulary v(std::vector<std::string>{"<pad>", "<unk>", "<bos>", "<eos>", "<mask>", "C", "O"});
  ASSERT_EQ(v.size(), 7u);
  auto cfg = tiny(7);
  auto params = init_model(cfg, 8);
  std::vector<std::string> smiles{"CCO", "OCC", "CCCCO", "COC", "CCOCC", "O", "CO"};
  EXPECT_NEAR(zero_shot_downstream_loss(params, v, smiles, 2), std::log(7.0), 0.3);
}

TEST(MetricRecord, RowsAndFiniteness) {
  MetricRecord r{"ckpt-0001", 0.25, 2.5, 10.0, {}};
  r.tasks["bbbp"] = {2.7, 1.1, {{"ft", 0, "roc_auc", 0.8}, {"lp", 0, "roc_auc", 0.7}}};
  auto rows = metric_rows(r);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].size(), kMetricsHeader.size());
  EXPECT_EQ(rows[1][5], "lp");
  EXPECT_EQ(rows[0][1], "0.25");
  r.tr_h = NAN;
  EXPECT_THROW(metric_rows(r), std::invalid_argument);
}
