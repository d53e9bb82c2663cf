#include <gtest/gtest.h>

#include <filesystem>

#include "clm/tokenizer.hpp"

using namespace clm;

TEST(Split, SimpleAtoms) {
  EXPECT_EQ(split_smiles("CCO"), (std::vector<std::string>{"C", "C", "O"}));
}

TEST(Split, Aromatic) {
  EXPECT_EQ(split_smiles("c1ccccc1"), (std::vector<std::string>{"c", "1", "c", "c", "c", "c", "c", "1"}));
}

TEST(Split, BracketAtomIsOneToken) {
  EXPECT_EQ(split_smiles("C[C@@H](N)O"), (std::vector<std::string>{"C", "[C@@H]", "(", "N", ")", "O"}));
}

TEST(Split, HalogensAndRingClosures) {
  EXPECT_EQ(split_smiles("ClC%12Br"), (std::vector<std::string>{"Cl", "C", "%12", "Br"}));
  EXPECT_EQ(split_smiles("C=C#N.[Na+]"), (std::vector<std::string>{"C", "=", "C", "#", "N", ".", "[Na+]"}));
}

TEST(Split, UnmatchedCharacterReportsOffset) {
  try {
    split_smiles("CCX");
    FAIL();
  } catch (const TokenizeError& e) {
    EXPECT_EQ(e.offset(), 2u);
  }
  EXPECT_THROW(split_smiles("C[NH"), TokenizeError);
}

TEST(Vocab, FromSingleLine) {
  auto v = build_vocab("CCO");
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.token(5), "C");
  EXPECT_EQ(v.token(6), "O");
}

TEST(Vocab, DuplicatesCollapse) {
  EXPECT_EQ(build_vocab("CCO\nOCC\n"), build_vocab("CCO"));
}

TEST(Vocab, EmptyCorpus) {
  try {
    build_vocab("");
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("empty corpus"), std::string::npos);
  }
  EXPECT_THROW(build_vocab("\n\n"), std::exception);
}

TEST(Vocab, InvalidUtf8NamesLine) {
  try {
    build_vocab(std::string("CCO\nC\xff\n"));
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Vocab, IdsAreInverses) {
  auto v = build_vocab("CC(=O)Oc1ccccc1C(=O)O\nC[C@@H](N)Cl");
  for (TokenId i = 0; i < static_cast<TokenId>(v.size()); ++i) EXPECT_EQ(v.id_of(v.token(i)), i);
  EXPECT_EQ(v.id_of("Xe"), special::unk);
}

TEST(Vocab, SaveLoadStable) {
  auto v = build_vocab("CC(=O)Oc1ccccc1C(=O)O\nBrC[N+](C)(C)C");
  auto path = std::filesystem::temp_directory_path() / "clm_vocab_test.txt";
  v.save(path);
  EXPECT_EQ(Vocabulary::load(path), v);
  std::filesystem::remove(path);
}

TEST(Vocab, RejectsBadSpecials) {
  EXPECT_THROW(Vocabulary({"<unk>", "<pad>", "<bos>", "<eos>", "<mask>"}), std::invalid_argument);
  EXPECT_THROW(Vocabulary({"<pad>", "<unk>", "<bos>", "<eos>", "<mask>", "C", "C"}), std::invalid_argument);
}

TEST(Tokenize, RoundTrip) {
  auto v = build_vocab("c1ccccc1\nCCO");
  for (const char* s : {"CCO", "c1ccccc1", "OCC"}) EXPECT_EQ(detokenize(tokenize(s, v), v), s);
}

TEST(Tokenize, UnknownMapsToUnk) {
  auto v = build_vocab("CCO");
  auto seq = tokenize("CCN", v);
  EXPECT_EQ(seq.ids.back(), special::unk);
  EXPECT_THROW(detokenize(seq, v), std::invalid_argument);
}

TEST(Tokenize, MaskIsRejectedOnDetokenize) {
  auto v = build_vocab("CCO");
  TokenSequence s{{5, special::mask}, ""};
  EXPECT_THROW(detokenize(s, v), std::invalid_argument);
}

TEST(Tokenize, EmptyInput) {
  EXPECT_THROW(tokenize("", build_vocab("C")), std::invalid_argument);
}

TEST(Filter, Threshold512) {
  std::vector<TokenSequence> seqs;
  for (std::size_t n : {3u, 512u, 513u}) seqs.push_back({std::vector<TokenId>(n, 5), ""});
  auto kept = filter_by_length(seqs, 512);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].size(), 3u);
  EXPECT_EQ(kept[1].size(), 512u);
  EXPECT_TRUE(filter_by_length({}, 512).empty());
  auto v = build_vocab("CCO");
  EXPECT_TRUE(filter_by_length({tokenize("CCO", v)}, 1).empty());
  EXPECT_THROW(filter_by_length({}, 0), std::invalid_argument);
}
