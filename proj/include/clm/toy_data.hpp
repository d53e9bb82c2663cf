#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clm/rng.hpp"

namespace clm {

// Grammar-sampled SMILES-like strings: chains with branches, single-digit ring
// closures, aromatic rings, a few bracket atoms and halogens. Not validated
// chemistry, only the surface syntax the tokenizer covers.
struct SmilesGrammar {
  std::size_t min_atoms = 4;
  std::size_t max_atoms = 18;
  double branch_prob = 0.2;
  double ring_prob = 0.15;
  double aromatic_prob = 0.25;
  double halogen_prob = 0.5;  // chance a molecule carries at least one halogen
};

std::string sample_smiles(Rng& rng, const SmilesGrammar& grammar = {});

// Lines of synthetic SMILES whose atom-wise token count reaches `min_tokens`.
std::vector<std::string> synthetic_corpus(std::size_t min_tokens, std::uint64_t seed,
                                          const SmilesGrammar& grammar = {});

struct ToyRow {
  std::string smiles;
  std::string split;  // train | valid | test
  std::vector<std::string> labels;  // empty string = missing
};

// Classification: label 1 iff the molecule contains a halogen token
// (F, Cl, Br, I). Balanced by construction.
std::vector<ToyRow> toy_classification_task(std::size_t n, std::uint64_t seed);
// Regression: fraction of heteroatom tokens (N, O, S and aromatic n, o, s)
// among all atom tokens.
std::vector<ToyRow> toy_regression_task(std::size_t n, std::uint64_t seed);

// CSV text with header `smiles,split,<target names>`.
std::string toy_task_csv(const std::vector<ToyRow>& rows, const std::vector<std::string>& target_names);

}  // namespace clm
