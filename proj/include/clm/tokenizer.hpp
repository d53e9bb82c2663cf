#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace clm {

using TokenId = std::int32_t;

class TokenizeError : public std::runtime_error {
 public:
  TokenizeError(const std::string& what, std::size_t offset)
      : std::runtime_error(what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Fixed special-token layout: these occupy ids 0-4 in every vocabulary.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId unk = 1;
inline constexpr TokenId bos = 2;
inline constexpr TokenId eos = 3;
inline constexpr TokenId mask = 4;
inline constexpr TokenId count = 5;
}  // namespace special

inline bool is_special(TokenId id) { return id >= 0 && id < special::count; }

class Vocabulary {
 public:
  // Only the five specials.
  Vocabulary();
  // `tokens` must start with the five specials in canonical order.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  // Returns unk for tokens that are not in the vocabulary.
  TokenId id_of(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::string source;

  std::size_t size() const { return ids.size(); }
};

// Splits a SMILES string into atom-wise surface tokens. Bracket atoms,
// two-letter halogens and %NN ring closures are single tokens. Throws
// TokenizeError carrying the byte offset of the first unmatched character.
std::vector<std::string> split_smiles(std::string_view smiles);

// Builds a vocabulary from newline-delimited corpus text, appending tokens in
// order of first occurrence after the specials. Blank lines are skipped.
Vocabulary build_vocab(std::string_view corpus_text);
Vocabulary build_vocab(std::span<const std::string> corpus_lines);

TokenSequence tokenize(std::string_view smiles, const Vocabulary& vocab);
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

// Keeps the sequences with at most `max_len` tokens, in order.
std::vector<TokenSequence> filter_by_length(std::vector<TokenSequence> sequences, std::size_t max_len);

// Returns the byte offset of the first invalid UTF-8 sequence, or npos.
std::size_t find_invalid_utf8(std::string_view text);

}  // namespace clm
