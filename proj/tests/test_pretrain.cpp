#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "clm/checkpoint.hpp"
#include "clm/optimizer.hpp"
#include "clm/pretrain.hpp"

using namespace clm;

namespace {

std::vector<TokenSequence> random_corpus(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence s;
    const auto len = 3 + rng.below(8);
    for (std::size_t k = 0; k < len; ++k) s.ids.push_back(static_cast<TokenId>(5 + rng.below(vocab - 5)));
    out.push_back(std::move(s));
  }
  return out;
}

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.d_model = 16;
  c.n_head = 2;
  c.n_layer = 1;
  c.d_ff = 32;
  c.vocab_size = vocab;
  c.max_len = 16;
  return c;
}

}  // namespace

TEST(Masking, HundredTokensSelectsFifteen) {
  std::vector<TokenId> ids(100, 7);
  Rng rng(1);
  auto m = apply_mlm_mask(ids, {}, 20, rng);
  EXPECT_EQ(m.positions.size(), 15u);
  EXPECT_EQ(m.targets.size(), 15u);
}

TEST(Masking, SingleTokenIsAlwaysSelected) {
  std::vector<TokenId> ids{special::bos, 9, special::eos};
  Rng rng(3);
  auto m = apply_mlm_mask(ids, {}, 20, rng);
  ASSERT_EQ(m.positions, std::vector<std::size_t>{1});
  EXPECT_EQ(m.targets, std::vector<TokenId>{9});
  EXPECT_EQ(m.ids[0], special::bos);
  EXPECT_EQ(m.ids[2], special::eos);
}

TEST(Masking, NoMaskablePositions) {
  std::vector<TokenId> ids{special::bos, special::eos};
  Rng rng(3);
  EXPECT_THROW(apply_mlm_mask(ids, {}, 20, rng), std::invalid_argument);
}

TEST(Masking, FractionsOverManyTrials) {
  std::size_t masked = 0, random = 0, kept = 0, selected = 0;
  std::vector<TokenId> ids(20);
  for (std::size_t i = 0; i < 20; ++i) ids[i] = static_cast<TokenId>(5 + i);
  for (int trial = 0; trial < 10000; ++trial) {
    Rng rng(derive_seed(42, "trial", static_cast<std::uint64_t>(trial)));
    auto m = apply_mlm_mask(ids, {}, 1000, rng);
    selected += m.positions.size();
    for (std::size_t k = 0; k < m.positions.size(); ++k) {
      const auto now = m.ids[m.positions[k]];
      if (now == special::mask) ++masked;
      else if (now == m.targets[k]) ++kept;  // a random draw equal to the original counts as kept
      else ++random;
      EXPECT_FALSE(now != special::mask && is_special(now));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (std::find(m.positions.begin(), m.positions.end(), i) == m.positions.end()) {
        EXPECT_EQ(m.ids[i], ids[i]);
      }
    }
  }
  EXPECT_EQ(selected, 30000u);
  const double n = static_cast<double>(selected);
  EXPECT_NEAR(masked / n, 0.8, 0.01);
  EXPECT_NEAR(random / n, 0.1, 0.01);
  EXPECT_NEAR(kept / n, 0.1, 0.01);
}

TEST(Masking, PolicyValidation) {
  MaskingPolicy p;
  p.mask_frac = 0.7;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  MaskingPolicy q;
  q.select_rate = 1.0;
  EXPECT_THROW(q.validate(), std::invalid_argument);
}

TEST(MlmLoss, Examples) {
  ad::Tape<double> tape;
  std::vector<std::int32_t> t{3};
  EXPECT_NEAR(mlm_loss(tape.constant(Tensor<double>({1, 7})), std::span<const std::int32_t>(t)).value().item(),
              std::log(7.0), 1e-12);
  Tensor<double> sharp({1, 3}, {0, 0, 800});
  std::vector<std::int32_t> t2{2};
  EXPECT_NEAR(mlm_loss(tape.constant(sharp), std::span<const std::int32_t>(t2)).value().item(), 0.0, 1e-12);
  Tensor<double> two({2, 2}, {0, 1, 2, 0});
  std::vector<std::int32_t> t3{0, 1};
  const double a = std::log(1 + std::exp(1.0)), b = std::log(1 + std::exp(2.0));
  EXPECT_NEAR(mlm_loss(tape.constant(two), std::span<const std::int32_t>(t3)).value().item(), (a + b) / 2, 1e-12);
  std::vector<std::int32_t> none;
  EXPECT_THROW(mlm_loss(tape.constant(two), std::span<const std::int32_t>(none)), std::invalid_argument);
}

TEST(MlmLoss, UnselectedPositionsGetNoGradient) {
  ad::Tape<double> tape;
  Tensor<double> all({5, 4});
  for (std::size_t i = 0; i < all.numel(); ++i) all.data[i] = std::sin(static_cast<double>(i));
  auto logits = tape.leaf(all);
  std::vector<std::int32_t> rows{1, 3}, targets{2, 0};
  auto loss = mlm_loss(ad::embedding(logits, std::span<const std::int32_t>(rows)), std::span<const std::int32_t>(targets));
  std::vector<ad::Var<double>> wrt{logits};
  const auto g = tape.gradients(loss, wrt)[0].value();
  for (std::size_t r : {0u, 2u, 4u})
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(g.data[r * 4 + k], 0.0);
}

TEST(LrSchedule, Examples) {
  TrainSchedule s;
  EXPECT_DOUBLE_EQ(lr_at(2500, s), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(5000, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(1000000, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(0, s), 0.0);
  s.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(lr_at(0, s), 1e-3);
}

TEST(AdamW, ZeroGradientStillDecays) {
  std::vector<Tensor<float>> params{Tensor<float>::full({2, 2}, 1.0f), Tensor<float>::full({2}, 1.0f)};
  std::vector<Tensor<float>> grads{Tensor<float>({2, 2}), Tensor<float>({2})};
  AdamW opt({0.9, 0.98, 1e-8, 0.01}, {true, false});
  opt.step(params, grads, 0.1);
  for (float x : params[0].data) EXPECT_FLOAT_EQ(x, 1.0f - 0.1f * 0.01f);
  for (float x : params[1].data) EXPECT_EQ(x, 1.0f);
}

TEST(DecayMask, ExcludesEmbeddingsNormsBiases) {
  const auto p = init_model(small_config(12), 1);
  const auto mask = weight_decay_mask(p);
  const auto lay = p.layout();
  EXPECT_FALSE(mask[lay.token_embedding]);
  EXPECT_FALSE(mask[lay.position_embedding]);
  EXPECT_FALSE(mask[lay.blocks[0].ln1_gamma]);
  EXPECT_FALSE(mask[lay.blocks[0].q_bias]);
  EXPECT_TRUE(mask[lay.blocks[0].q_weight]);
  EXPECT_TRUE(mask[lay.pooler_weight]);
}

TEST(Train, SeventeenCheckpointsStrictlyIncreasing) {
  const auto corpus = random_corpus(64, 12, 1);
  TrainSchedule s;
  s.warmup_steps = 4;
  s.batch_size = 8;
  std::vector<Checkpoint> got;
  auto result = train(small_config(12), s, corpus, 5, [&](const Checkpoint& ck) { got.push_back(ck); });
  ASSERT_EQ(got.size(), 17u);
  EXPECT_EQ(result.checkpoints.size(), 17u);
  EXPECT_EQ(got.front().meta.step, 0u);
  EXPECT_EQ(got.back().meta.step, 32u);  // 4 epochs x 8 steps
  EXPECT_DOUBLE_EQ(got.back().meta.epoch_fraction, 4.0);
  for (std::size_t i = 1; i < got.size(); ++i) {
    EXPECT_GT(got[i].meta.epoch_fraction, got[i - 1].meta.epoch_fraction);
    EXPECT_EQ(got[i].meta.config_hash, got[0].meta.config_hash);
  }
  EXPECT_EQ(result.log.size(), 32u);
  EXPECT_EQ(got.back().params, result.final_params);
}

TEST(Train, DropsPartialBatch) {
  const auto corpus = random_corpus(20, 12, 2);
  TrainSchedule s;
  s.warmup_steps = 1;
  s.batch_size = 8;
  s.epochs = 1;
  s.checkpoint_interval_epochs = 0.5;
  std::uint64_t tokens_per_epoch = 0;
  auto r = train(small_config(12), s, corpus, 1, [&](const Checkpoint& ck) { tokens_per_epoch = ck.meta.tokens_seen; });
  EXPECT_EQ(r.log.size(), 2u);  // 20 / 8 = 2 full batches
  std::uint64_t total = 0;
  for (const auto& seq : corpus) total += seq.size();
  EXPECT_LT(tokens_per_epoch, total);
}

TEST(Train, BitIdenticalReruns) {
  const auto corpus = random_corpus(48, 12, 3);
  TrainSchedule s;
  s.warmup_steps = 2;
  s.batch_size = 8;
  s.epochs = 1;
  s.checkpoint_interval_epochs = 0.5;
  auto run = [&] {
    std::vector<std::vector<std::uint8_t>> files;
    train(small_config(12), s, corpus, 9, [&](const Checkpoint& ck) { files.push_back(serialize_checkpoint(ck)); });
    return files;
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, CorpusSmallerThanBatch) {
  const auto corpus = random_corpus(5, 12, 3);
  TrainSchedule s;
  s.batch_size = 8;
  EXPECT_THROW(train(small_config(12), s, corpus, 1, nullptr), std::invalid_argument);
}

TEST(EvalLoss, UntrainedNearUniform) {
  ModelConfig c = small_config(7);
  const auto params = init_model(c, 3);
  const auto val = random_corpus(64, 7, 8);
  const double l = eval_pretrain_loss(params, val, 11);
  EXPECT_NEAR(l, std::log(7.0), 0.3);
  EXPECT_EQ(l, eval_pretrain_loss(params, val, 11));
  EXPECT_NEAR(l, eval_pretrain_loss(params, val, 11, {}, 5), 1e-5);  // batching only changes padding
  EXPECT_THROW(eval_pretrain_loss(params, std::span<const TokenSequence>(), 11), std::invalid_argument);
}
