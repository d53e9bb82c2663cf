#include "clm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "clm/rng.hpp"

namespace clm {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::string join_lines(std::span<const std::string> lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

IngestResult ingest_corpus(std::span<const std::string> lines, std::uint64_t seed, const IngestOptions& options) {
  if (!(options.validation_fraction > 0.0 && options.validation_fraction < 1.0)) {
    throw std::invalid_argument("validation_fraction must lie in (0, 1)");
  }
  IngestResult r;
  std::unordered_set<std::string_view> seen;
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    ++r.n_lines;
    if (auto bad = find_invalid_utf8(line); bad != std::string::npos) {
      throw std::invalid_argument("invalid UTF-8 at line " + std::to_string(i + 1) + ", byte " + std::to_string(bad));
    }
    if (!seen.insert(line).second) {
      ++r.n_duplicates;
      continue;
    }
    std::size_t n_tokens = 0;
    try {
      n_tokens = split_smiles(line).size();
    } catch (const TokenizeError&) {
      ++r.n_unparsable;
      continue;
    }
    if (n_tokens > options.max_tokens) {
      ++r.n_too_long;
      continue;
    }
    kept.push_back(line);
  }
  if (kept.empty()) throw std::invalid_argument("empty corpus after filtering");
  r.vocab = build_vocab(std::span<const std::string>(kept));

  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  auto n_valid = static_cast<std::size_t>(std::llround(options.validation_fraction * static_cast<double>(kept.size())));
  if (kept.size() >= 2) n_valid = std::clamp<std::size_t>(n_valid, 1, kept.size() - 1);
  std::vector<bool> is_valid(kept.size(), false);
  for (std::size_t i = 0; i < n_valid; ++i) is_valid[order[i]] = true;
  for (std::size_t i = 0; i < kept.size(); ++i) (is_valid[i] ? r.validation : r.train).push_back(kept[i]);
  return r;
}

IngestResult ingest_corpus(const std::filesystem::path& path, std::uint64_t seed, const IngestOptions& options) {
  const auto lines = read_lines(path);
  return ingest_corpus(std::span<const std::string>(lines), seed, options);
}

std::vector<std::vector<std::string>> nested_subsample(std::span<const std::string> items,
                                                       std::span<const double> fractions, std::uint64_t seed) {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) throw std::invalid_argument("fractions must lie in (0, 1]");
    if (i > 0 && fractions[i] < fractions[i - 1]) throw std::invalid_argument("fractions must be sorted ascending");
  }
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "nested"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::string>> out;
  for (double f : fractions) {
    const auto n = std::min(items.size(), static_cast<std::size_t>(std::ceil(f * static_cast<double>(items.size()) - 1e-9)));
    std::vector<std::string> subset;
    subset.reserve(n);
    for (std::size_t i = 0; i < n; ++i) subset.push_back(items[order[i]]);
    out.push_back(std::move(subset));
  }
  return out;
}

std::vector<TokenSequence> tokenize_all(std::span<const std::string> lines, const Vocabulary& vocab) {
  std::vector<TokenSequence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(tokenize(l, vocab));
  return out;
}

}  // namespace clm
