#include <gtest/gtest.h>

#include <cmath>

#include "clm/checkpoint.hpp"
#include "clm/toy_data.hpp"
#include "clm/transfer.hpp"
#include "table1.hpp"

using namespace clm;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

DownstreamTask regression_task(std::vector<double> y) {
  DownstreamTask t;
  t.name = "r";
  t.kind = TaskKind::regression;
  t.metric = MetricKind::rmse;
  t.target_names = {"y"};
  for (std::size_t i = 0; i < y.size(); ++i) {
    t.smiles.push_back("C");
    t.labels.push_back(y[i]);
    (i % 5 == 3 ? t.splits.valid : i % 5 == 4 ? t.splits.test : t.splits.train).push_back(i);
  }
  return t;
}

struct ToyFixture {
  DownstreamTask task;
  Vocabulary vocab;
  EncoderParameters encoder;
};

ToyFixture toy_classification(std::size_t n, std::uint64_t seed) {
  ToyFixture f;
  f.task = parse_task_csv(toy_task_csv(toy_classification_task(n, seed), {"halogen"}), "toy");
  f.vocab = build_vocab(f.task.smiles);
  auto cfg = clm::testing::table1_config(clm::testing::kTable1[0], f.vocab.size(), 64);
  f.encoder = init_model(cfg, 11);
  return f;
}

}  // namespace

TEST(RocAuc, Examples) {
  std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  std::vector<int> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(roc_auc(s, y), 0.75);
  std::vector<double> sep{0.1, 0.2, 0.8, 0.9};
  EXPECT_DOUBLE_EQ(roc_auc(sep, y), 1.0);
  std::vector<double> same(4, 0.3);
  EXPECT_DOUBLE_EQ(roc_auc(same, y), 0.5);
}

TEST(RocAuc, SingleClassThrows) {
  std::vector<double> s{0.1, 0.2};
  std::vector<int> y{1, 1};
  EXPECT_THROW(roc_auc(s, y), std::invalid_argument);
}

TEST(RocAuc, MatchesPairwiseOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(8));  // plenty of ties
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_DOUBLE_EQ(roc_auc(s, y), brute_auc(s, y));
  }
}

TEST(Errors, MaeRmse) {
  std::vector<double> p{3, -4}, y{0, 0};
  EXPECT_DOUBLE_EQ(mae(p, y), 3.5);
  EXPECT_NEAR(rmse(p, y), std::sqrt(12.5), 1e-12);
  std::vector<double> one{2.5}, zero{0};
  EXPECT_DOUBLE_EQ(mae(one, zero), rmse(one, zero));
  std::vector<double> missing{NAN, NAN};
  EXPECT_THROW(mae(p, missing), std::invalid_argument);
  std::vector<double> partial{NAN, 0};
  EXPECT_DOUBLE_EQ(mae(p, partial), 4.0);
}

TEST(Normalizer, PopulationStd) {
  auto t = regression_task({1, 2, 3});
  t.splits = {{0, 1, 2}, {}, {}};
  auto n = TargetNormalizer::fit(t, t.splits.train);
  EXPECT_NEAR(n.normalize(1, 0), -1.2247448713915890, 1e-12);
  EXPECT_NEAR(n.normalize(2, 0), 0.0, 1e-12);
  EXPECT_NEAR(n.normalize(3, 0), 1.2247448713915890, 1e-12);
  for (double y : {-7.5, 0.0, 123.25}) EXPECT_NEAR(n.denormalize(n.normalize(y, 0), 0), y, 1e-9);
}

TEST(Normalizer, StandardizedIsIdentity) {
  auto t = regression_task({-1, 1});
  t.splits = {{0, 1}, {}, {}};
  auto n = TargetNormalizer::fit(t, t.splits.train);
  EXPECT_NEAR(n.normalize(0.3, 0), 0.3, 1e-9);
}

TEST(Normalizer, ConstantThrows) {
  auto t = regression_task({5, 5, 5});
  t.splits = {{0, 1, 2}, {}, {}};
  EXPECT_THROW(TargetNormalizer::fit(t, t.splits.train), std::invalid_argument);
}

TEST(BatchRule, Boundaries) {
  EXPECT_EQ(batch_size_rule(1), 32u);
  EXPECT_EQ(batch_size_rule(1000), 32u);
  EXPECT_EQ(batch_size_rule(1001), 256u);
  EXPECT_EQ(batch_size_rule(5000), 256u);
  EXPECT_EQ(batch_size_rule(5001), 512u);
}

TEST(TaskCsv, ParsesMissingAndInfersKind) {
  auto t = parse_task_csv("smiles,split,a,b\nCC,train,1,\nCO,valid,0,1\nCN,test,1,0\n", "x");
  EXPECT_EQ(t.kind, TaskKind::classification);
  EXPECT_EQ(t.metric, MetricKind::roc_auc);
  EXPECT_EQ(t.n_targets(), 2u);
  EXPECT_TRUE(std::isnan(t.label(0, 1)));
  EXPECT_EQ(t.splits.valid, std::vector<std::size_t>{1});
  auto r = parse_task_csv("smiles,split,y\nCC,train,1.5\nCO,valid,2\nCN,test,0\n", "y");
  EXPECT_EQ(r.kind, TaskKind::regression);
  EXPECT_EQ(r.metric, MetricKind::rmse);
}

TEST(TaskCsv, Rejections) {
  EXPECT_THROW(parse_task_csv("smiles,split,y\nCC,dev,1\n", "x"), std::invalid_argument);
  EXPECT_THROW(parse_task_csv("smiles,split,y\nCC,train,abc\n", "x"), std::invalid_argument);
  EXPECT_THROW(parse_task_csv("smiles,split,y\nCC,train,0.5\nCO,valid,1\nCN,test,0\n", "x", TaskKind::classification),
               std::invalid_argument);
  EXPECT_THROW(parse_task_csv("smiles,split,y\nCC,train,1\nCO,valid,1\nCN,test,0\n", "x", TaskKind::classification,
                              MetricKind::mae),
               std::invalid_argument);
}

TEST(MultitaskLoss, MasksCells) {
  ad::Tape<double> tape;
  auto out = tape.leaf(Tensor<double>({2, 2}, {0.5, -1.0, 2.0, 0.25}));
  std::vector<double> y{1, 0, 0, 0};
  std::vector<std::uint8_t> all{1, 1, 1, 1};
  auto l = multitask_loss(out, y, all, TaskKind::classification);
  auto sp = [](double z) { return std::log1p(std::exp(z)); };
  const double expect = (sp(0.5) - 0.5 + sp(-1.0) + sp(2.0) + sp(0.25)) / 4;
  EXPECT_NEAR(l.value().item(), expect, 1e-12);

  std::vector<std::uint8_t> one{0, 0, 1, 0};
  EXPECT_NEAR(multitask_loss(out, y, one, TaskKind::classification).value().item(), sp(2.0), 1e-12);
  std::vector<double> ry{1, 0, 0, 3};
  EXPECT_NEAR(multitask_loss(out, ry, one, TaskKind::regression).value().item(), 4.0, 1e-12);

  std::vector<std::uint8_t> none(4, 0);
  EXPECT_THROW(multitask_loss(out, y, none, TaskKind::regression), std::invalid_argument);
}

TEST(MultitaskLoss, MaskedTargetGetsNoHeadGradient) {
  ad::Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3, 2}, {1, 2, -1, 0.5, 0.3, 0.7}));
  auto w = tape.leaf(Tensor<double>({2, 2}, {0.1, 0.2, -0.3, 0.4}));
  auto out = ad::matmul(x, w);
  std::vector<double> y{1, 0, 0, 0, 1, 1};
  std::vector<std::uint8_t> mask{1, 0, 1, 0, 1, 0};  // target 2 never observed
  auto l = multitask_loss(out, y, mask, TaskKind::classification);
  std::vector<ad::Var<double>> wrt{w};
  auto g = tape.gradients(l, wrt)[0].value();
  EXPECT_EQ(g.data[1], 0.0);
  EXPECT_EQ(g.data[3], 0.0);
  EXPECT_NE(g.data[0], 0.0);
}

TEST(Seeds, SampleStd) {
  std::vector<double> v{1, 2, 3};
  auto s = summarize_seeds(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.stddev, 1.0);
  std::vector<double> one{0.7};
  EXPECT_DOUBLE_EQ(summarize_seeds(one).stddev, 0.0);
}

TEST(Probe, IdentityFeaturesFitRegression) {
  Rng rng(3);
  std::vector<double> y;
  for (int i = 0; i < 200; ++i) y.push_back(10 + 4 * rng.normal());
  auto t = regression_task(y);
  auto norm = TargetNormalizer::fit(t, t.splits.train);
  Tensor<float> feats({y.size(), 1});
  for (std::size_t i = 0; i < y.size(); ++i) feats.data[i] = static_cast<float>(norm.normalize(y[i], 0));
  TransferOptions o;
  o.lr = 0.05;
  o.max_epochs = 200;
  auto r = probe_on_features(feats, t, 1, o);
  EXPECT_LT(r.metric, 0.05);
  EXPECT_GT(r.best_epoch, 0u);
}

TEST(Probe, FreezesEncoderAndIsDeterministic) {
  auto f = toy_classification(120, 2);
  const auto before = serialize_checkpoint({f.encoder, {}});
  TransferOptions o;
  o.lr = 1e-2;
  o.max_epochs = 5;
  auto a = linear_probe(f.encoder, f.vocab, f.task, 7, o);
  auto b = linear_probe(f.encoder, f.vocab, f.task, 7, o);
  EXPECT_EQ(serialize_checkpoint({f.encoder, {}}), before);
  EXPECT_TRUE(a.encoder == f.encoder);
  EXPECT_EQ(a.metric, b.metric);
  EXPECT_TRUE(a.head.weight == b.head.weight);
}

TEST(Finetune, ZeroEpochsEqualsInitialHead) {
  auto f = toy_classification(120, 2);
  TransferOptions o;
  o.max_epochs = 0;
  auto r = finetune(f.encoder, f.vocab, f.task, 4, o);
  EXPECT_TRUE(r.encoder == f.encoder);
  EXPECT_TRUE(r.head.weight == init_head(f.encoder.config.d_model, 1, 4).weight);
}

TEST(Finetune, SeparableToyTaskAndDeterminism) {
  auto f = toy_classification(240, 1);
  TransferOptions o;
  o.lr = 1e-3;
  o.max_epochs = 15;
  auto a = finetune(f.encoder, f.vocab, f.task, 3, o);
  EXPECT_GE(a.metric, 0.95) << "epochs " << a.epochs_run << " best " << a.best_epoch;
  auto b = finetune(f.encoder, f.vocab, f.task, 3, o);
  EXPECT_EQ(a.metric, b.metric);
  EXPECT_TRUE(a.encoder == b.encoder);
}
