#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "clm/tokenizer.hpp"

namespace clm {

struct IngestOptions {
  std::size_t max_tokens = 512;
  double validation_fraction = 0.1;
};

struct IngestResult {
  Vocabulary vocab;
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::size_t n_lines = 0;        // non-blank input lines
  std::size_t n_duplicates = 0;
  std::size_t n_unparsable = 0;   // lines the atom-wise pattern cannot split
  std::size_t n_too_long = 0;
};

// Exact-string dedup (first occurrence wins), tokenizer/length filter, then a
// seeded split. Both halves keep input order. The vocabulary covers every
// retained line.
IngestResult ingest_corpus(std::span<const std::string> lines, std::uint64_t seed, const IngestOptions& options = {});
IngestResult ingest_corpus(const std::filesystem::path& path, std::uint64_t seed, const IngestOptions& options = {});

// Prefixes of one seeded permutation of `items`: result[i] holds the first
// ceil(fractions[i] * n) items, so smaller sets are subsets of larger ones.
std::vector<std::vector<std::string>> nested_subsample(std::span<const std::string> items,
                                                       std::span<const double> fractions, std::uint64_t seed);

std::vector<std::string> read_lines(const std::filesystem::path& path);
std::string join_lines(std::span<const std::string> lines);

std::vector<TokenSequence> tokenize_all(std::span<const std::string> lines, const Vocabulary& vocab);

}  // namespace clm
