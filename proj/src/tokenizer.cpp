#include "clm/tokenizer.hpp"

#include <array>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace clm {
namespace {

constexpr std::array<std::string_view, special::count> kSpecialTokens = {
    "<pad>", "<unk>", "<bos>", "<eos>", "<mask>"};

constexpr std::string_view kSingleAtoms = "BCNOPSFIbcnops";
constexpr std::string_view kSymbols = "-=#$:/\\().+@*";

bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    start = end + 1;
  }
  return lines;
}

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>(kSpecialTokens.begin(), kSpecialTokens.end())) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < special::count) throw std::invalid_argument("vocabulary is missing special tokens");
  for (TokenId i = 0; i < special::count; ++i) {
    if (tokens_[i] != kSpecialTokens[i]) {
      throw std::invalid_argument("vocabulary line " + std::to_string(i) + " must be " +
                                  std::string(kSpecialTokens[i]) + ", found '" + tokens_[i] + "'");
    }
  }
  ids_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw std::invalid_argument("empty token at id " + std::to_string(i));
    auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw std::invalid_argument("duplicate token '" + tokens_[i] + "' at id " + std::to_string(i));
  }
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id_of(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? special::unk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw std::runtime_error("failed writing vocabulary file " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocabulary file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  if (!text.empty() && text.back() == '\n') text.pop_back();
  return Vocabulary(split_lines(text));
}

std::vector<std::string> split_smiles(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '[') {
      const std::size_t close = s.find(']', i + 1);
      if (close == std::string_view::npos) throw TokenizeError("unterminated bracket atom at byte " + std::to_string(i), i);
      if (close == i + 1) throw TokenizeError("empty bracket atom at byte " + std::to_string(i), i);
      out.emplace_back(s.substr(i, close - i + 1));
      i = close + 1;
    } else if ((c == 'C' && i + 1 < s.size() && s[i + 1] == 'l') ||
               (c == 'B' && i + 1 < s.size() && s[i + 1] == 'r')) {
      out.emplace_back(s.substr(i, 2));
      i += 2;
    } else if (kSingleAtoms.find(c) != std::string_view::npos || is_digit(c) ||
               kSymbols.find(c) != std::string_view::npos) {
      out.emplace_back(1, c);
      i += 1;
    } else if (c == '%' && i + 2 < s.size() && is_digit(s[i + 1]) && is_digit(s[i + 2])) {
      out.emplace_back(s.substr(i, 3));
      i += 3;
    } else {
      throw TokenizeError("unexpected character '" + std::string(1, c) + "' at byte " + std::to_string(i), i);
    }
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> lines) {
  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  std::unordered_set<std::string> seen(tokens.begin(), tokens.end());
  bool any = false;
  for (std::size_t line_no = 0; line_no < lines.size(); ++line_no) {
    const std::string& line = lines[line_no];
    if (line.empty()) continue;
    if (find_invalid_utf8(line) != std::string_view::npos) {
      throw std::invalid_argument("invalid UTF-8 on corpus line " + std::to_string(line_no + 1));
    }
    any = true;
    std::vector<std::string> pieces;
    try {
      pieces = split_smiles(line);
    } catch (const TokenizeError& e) {
      throw TokenizeError("corpus line " + std::to_string(line_no + 1) + ": " + e.what(), e.offset());
    }
    for (auto& p : pieces) {
      if (seen.insert(p).second) tokens.push_back(std::move(p));
    }
  }
  if (!any) throw std::invalid_argument("empty corpus");
  return Vocabulary(std::move(tokens));
}

Vocabulary build_vocab(std::string_view corpus_text) {
  const auto lines = split_lines(corpus_text);
  return build_vocab(std::span<const std::string>(lines));
}

TokenSequence tokenize(std::string_view smiles, const Vocabulary& vocab) {
  if (smiles.empty()) throw std::invalid_argument("cannot tokenize an empty SMILES string");
  TokenSequence seq;
  seq.source = std::string(smiles);
  for (const auto& piece : split_smiles(smiles)) seq.ids.push_back(vocab.id_of(piece));
  return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const TokenId id = seq.ids[i];
    if (id == special::unk || id == special::pad || id == special::mask) {
      throw std::invalid_argument("cannot detokenize special token " + vocab.token(id) + " at position " +
                                  std::to_string(i));
    }
    if (id == special::bos || id == special::eos) continue;
    out += vocab.token(id);
  }
  return out;
}

std::vector<TokenSequence> filter_by_length(std::vector<TokenSequence> sequences, std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  std::erase_if(sequences, [max_len](const TokenSequence& s) { return s.size() > max_len; });
  return sequences;
}

std::size_t find_invalid_utf8(std::string_view text) {
  std::size_t i = 0;
  while (i < text.size()) {
    const auto b = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (b < 0x80) {
      ++i;
      continue;
    } else if ((b & 0xE0) == 0xC0) {
      len = 2;
      cp = b & 0x1F;
    } else if ((b & 0xF0) == 0xE0) {
      len = 3;
      cp = b & 0x0F;
    } else if ((b & 0xF8) == 0xF0) {
      len = 4;
      cp = b & 0x07;
    } else {
      return i;
    }
    if (i + len > text.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cont = static_cast<unsigned char>(text[i + k]);
      if ((cont & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (cont & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::string_view::npos;
}

}  // namespace clm
