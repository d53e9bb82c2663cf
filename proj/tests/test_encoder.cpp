#include <gtest/gtest.h>

#include <cmath>

#include "clm/encoder.hpp"
#include "clm/rng.hpp"
#include "table1.hpp"

using namespace clm;
using namespace clm::ad;

namespace {

ModelConfig tiny(std::size_t vocab = 12) {
  ModelConfig c;
  c.d_model = 8;
  c.n_head = 2;
  c.n_layer = 2;
  c.d_ff = 16;
  c.vocab_size = vocab;
  c.max_len = 16;
  c.dropout_rate = 0.0;
  return c;
}

template <class Real>
std::vector<Var<Real>> leaves(Tape<Real>& tape, const std::vector<Tensor<Real>>& ts) {
  std::vector<Var<Real>> out;
  for (const auto& t : ts) out.push_back(tape.leaf(t));
  return out;
}

}  // namespace

TEST(ParamCount, Table1WithinFivePercent) {
  for (const auto& row : clm::testing::kTable1) {
    const double got = static_cast<double>(count_non_embedding_params(clm::testing::table1_config(row))) / 1e6;
    EXPECT_LT(std::abs(got - row.params_m) / row.params_m, 0.05) << row.d_model << " -> " << got;
  }
}

TEST(ParamCount, MatchesInstantiatedTensors) {
  const auto c = tiny();
  const auto p = init_model(c, 1);
  std::size_t n = 0;
  for (auto i : p.encoder_indices()) n += p.tensors[i].value.numel();
  EXPECT_EQ(n, count_non_embedding_params(c));
  std::size_t block = 0;
  for (auto i : p.layout().final_block()) block += p.tensors[i].value.numel();
  EXPECT_EQ(block, count_block_params(c));
}

TEST(Init, DeterministicAndSeedSensitive) {
  const auto c = tiny();
  EXPECT_EQ(init_model(c, 7), init_model(c, 7));
  EXPECT_FALSE(init_model(c, 1) == init_model(c, 2));
}

TEST(Init, TruncatedNormalAndConstants) {
  const auto p = init_model(tiny(), 3);
  const auto lay = p.layout();
  for (float x : p.tensors[lay.token_embedding].value.data) EXPECT_LE(std::abs(x), 0.04f + 1e-7f);
  for (float x : p.tensors[lay.blocks[0].ln1_gamma].value.data) EXPECT_EQ(x, 1.0f);
  for (float x : p.tensors[lay.blocks[0].q_bias].value.data) EXPECT_EQ(x, 0.0f);
}

TEST(Init, InvalidConfigNamesInvariant) {
  auto c = tiny();
  c.d_model = 64;
  c.n_head = 3;
  try {
    init_model(c, 1);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
}

TEST(Flatten, RoundTrip) {
  auto p = init_model(tiny(), 5);
  auto q = init_model(tiny(), 6);
  q.unflatten(p.flatten());
  EXPECT_EQ(p, q);
  std::vector<float> wrong(3);
  EXPECT_THROW(q.unflatten(wrong), std::invalid_argument);
}

TEST(Forward, LogitShape) {
  auto c = tiny(7);
  auto params = init_model(c, 1).as<float>();
  Tape<float> tape;
  auto vars = leaves(tape, params);
  std::vector<std::vector<TokenId>> seqs{{5, 6, 5}};
  auto logits = forward_mlm<float>(tape, vars, c, make_raw_batch(seqs));
  EXPECT_EQ(logits.shape(), (Shape{3, 7}));
}

TEST(Forward, TooLongThrows) {
  auto c = tiny();
  auto params = init_model(c, 1).as<float>();
  Tape<float> tape;
  auto vars = leaves(tape, params);
  std::vector<std::vector<TokenId>> seqs{std::vector<TokenId>(c.max_len - 1, 5)};
  EXPECT_THROW(encode<float>(tape, vars, c, make_batch(seqs)), std::invalid_argument);
}

TEST(Forward, PaddingInvariance) {
  auto c = tiny();
  auto params = init_model(c, 2).as<float>();
  std::vector<std::vector<TokenId>> one{{5, 6, 7, 8}};
  std::vector<std::vector<TokenId>> two{{5, 6, 7, 8}, {5, 6, 7, 8, 9, 10, 11, 5, 6}};
  Tape<float> t1, t2;
  auto v1 = leaves(t1, params);
  auto v2 = leaves(t2, params);
  auto a = forward_mlm<float>(t1, v1, c, make_batch(one));
  auto b = forward_mlm<float>(t2, v2, c, make_batch(two));
  const std::size_t rows = 6;  // <bos> + 4 + <eos>
  for (std::size_t i = 0; i < rows * c.vocab_size; ++i) EXPECT_NEAR(a.value().data[i], b.value().data[i], 1e-5);
}

TEST(Forward, EvalIsDeterministic) {
  auto c = tiny();
  c.dropout_rate = 0.3;
  auto params = init_model(c, 2).as<float>();
  std::vector<std::vector<TokenId>> seqs{{5, 6, 7}};
  Rng r1(1), r2(2);
  Tape<float> t1, t2;
  auto v1 = leaves(t1, params);
  auto v2 = leaves(t2, params);
  EXPECT_EQ(forward_mlm<float>(t1, v1, c, make_batch(seqs), &r1).value(),
            forward_mlm<float>(t2, v2, c, make_batch(seqs), &r2).value());
}

TEST(Pooling, BosPicksFirstRow) {
  Tape<double> tape;
  Tensor<double> h({6, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  std::vector<std::vector<TokenId>> seqs{{5}, {6}};
  auto b = make_batch(seqs);  // two sequences of length 3
  auto pooled = pool_bos(tape.constant(h), b);
  EXPECT_EQ(pooled.value(), Tensor<double>({2, 2}, {1, 2, 7, 8}));
  auto raw = make_raw_batch(seqs);
  EXPECT_THROW(pool_bos(tape.constant(Tensor<double>({2, 2})), raw), std::invalid_argument);
}

TEST(Pooling, MeanExcludesSpecials) {
  Tape<double> tape;
  Tensor<double> h({4, 2}, {9, 9, 1, 2, 3, 6, 9, 9});
  std::vector<std::uint8_t> special{1, 0, 0, 1};
  EXPECT_EQ(pool_mean(tape.constant(h), 1, special).value(), Tensor<double>({1, 2}, {2, 4}));
  std::vector<std::uint8_t> single{1, 0, 1, 1};
  EXPECT_EQ(pool_mean(tape.constant(h), 1, single).value(), Tensor<double>({1, 2}, {1, 2}));
  std::vector<std::uint8_t> all(4, 1);
  EXPECT_THROW(pool_mean(tape.constant(h), 1, all), std::invalid_argument);
}

TEST(Pooling, MeanIsPermutationEquivariant) {
  Tape<double> tape;
  Tensor<double> h({4, 2}, {9, 9, 1, 2, 3, 6, 9, 9});
  Tensor<double> swapped({4, 2}, {9, 9, 3, 6, 1, 2, 9, 9});
  std::vector<std::uint8_t> special{1, 0, 0, 1};
  EXPECT_EQ(pool_mean(tape.constant(h), 1, special).value(), pool_mean(tape.constant(swapped), 1, special).value());
}

TEST(Pooling, SpecialPositions) {
  std::vector<std::vector<TokenId>> seqs{{5}, {5, 6}};
  auto b = make_batch(seqs);
  EXPECT_EQ(special_positions(b), (std::vector<std::uint8_t>{1, 0, 1, 1, 1, 0, 0, 1}));
}

TEST(Gradient, MlmLossMatchesFiniteDifferences) {
  auto c = tiny();
  const auto params = init_model(c, 4).as<double>();
  std::vector<std::vector<TokenId>> seqs{{5, 6, 7, 8, 9}, {10, 11, 5}};
  const auto batch = make_batch(seqs);
  std::vector<std::int32_t> rows{1, 3, 8}, targets{6, 8, 10};
  LossFn<double> f = [&](Tape<double>&, std::span<const Var<double>> p) {
    auto h = encode<double>(p[0].tape(), p, c, batch);
    return cross_entropy(mlm_logits<double>(p, c, h, rows), std::span<const std::int32_t>(targets));
  };
  const auto g = gradient<double>(f, params);
  auto value = [&](const std::vector<Tensor<double>>& ps) {
    Tape<double> tape;
    auto vars = leaves(tape, ps);
    return f(tape, vars).value().item();
  };
  Rng pick(9);
  double worst = 0;
  auto work = params;
  for (int trial = 0; trial < 150; ++trial) {
    const auto k = static_cast<std::size_t>(pick.below(work.size()));
    const auto i = static_cast<std::size_t>(pick.below(work[k].numel()));
    const double x0 = work[k].data[i];
    work[k].data[i] = x0 + 1e-4;
    const double up = value(work);
    work[k].data[i] = x0 - 1e-4;
    const double down = value(work);
    work[k].data[i] = x0;
    const double fd = (up - down) / 2e-4;
    worst = std::max(worst, std::abs(g[k].data[i] - fd) / std::max(std::abs(fd), 1e-3));
  }
  EXPECT_LT(worst, 1e-3);
}
