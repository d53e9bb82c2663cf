#include "clm/toy_data.hpp"

#include <array>
#include <cctype>
#include <cstdio>
#include <stdexcept>
#include <string_view>

#include "clm/tokenizer.hpp"

namespace clm {

namespace {

constexpr std::array<std::string_view, 4> kHalogens{"F", "Cl", "Br", "I"};

struct Weighted {
  std::string_view token;
  double weight;
};

constexpr std::array<Weighted, 9> kAtoms{{
    {"C", 0.52},
    {"N", 0.12},
    {"O", 0.14},
    {"S", 0.04},
    {"P", 0.01},
    {"[NH+]", 0.01},
    {"[O-]", 0.01},
    {"[C@@H]", 0.02},
    {"[C@H]", 0.02},
}};

std::string_view pick_atom(Rng& rng) {
  double total = 0.0;
  for (const auto& a : kAtoms) total += a.weight;
  double u = rng.uniform() * total;
  for (const auto& a : kAtoms) {
    if (u < a.weight) return a.token;
    u -= a.weight;
  }
  return kAtoms.back().token;
}

class Builder {
 public:
  Builder(Rng& rng, const SmilesGrammar& g) : rng_(rng), g_(g) {}

  std::string molecule(bool halogen) {
    const std::size_t atoms = g_.min_atoms + rng_.below(g_.max_atoms - g_.min_atoms + 1);
    // Halogens go in as terminal branches at chosen atom positions.
    std::vector<std::size_t> halogen_at;
    if (halogen) {
      const std::size_t count = 1 + rng_.below(2);
      for (std::size_t i = 0; i < count; ++i) halogen_at.push_back(rng_.below(atoms));
    }
    std::string out;
    int open_ring = 0;
    std::size_t ring_age = 0;
    for (std::size_t i = 0; i < atoms; ++i) {
      if (i > 0 && rng_.uniform() < 0.12) out += rng_.uniform() < 0.85 ? "=" : "#";
      if (rng_.uniform() < g_.aromatic_prob / 4.0 && open_ring == 0) {
        const int d = next_digit();
        out += "c" + std::to_string(d) + "cccc" + (rng_.uniform() < 0.2 ? "n" : "c") + std::to_string(d);
      } else {
        out += pick_atom(rng_);
      }
      for (auto h : halogen_at) {
        if (h == i) out += "(" + std::string(kHalogens[rng_.below(kHalogens.size())]) + ")";
      }
      if (open_ring) {
        ++ring_age;
        if (ring_age >= 3 && rng_.uniform() < 0.5) {
          out += std::to_string(open_ring);
          open_ring = 0;
        }
      } else if (i + 3 < atoms && rng_.uniform() < g_.ring_prob) {
        open_ring = next_digit();
        ring_age = 0;
        out += std::to_string(open_ring);
      }
      if (i + 1 < atoms && rng_.uniform() < g_.branch_prob) {
        out += "(";
        const std::size_t len = 1 + rng_.below(3);
        for (std::size_t k = 0; k < len; ++k) {
          if (k > 0 && rng_.uniform() < 0.1) out += "=";
          out += pick_atom(rng_);
        }
        out += ")";
      }
    }
    if (open_ring) out += "C" + std::to_string(open_ring);
    return out;
  }

 private:
  int next_digit() { return 1 + static_cast<int>(rng_.below(9)); }

  Rng& rng_;
  const SmilesGrammar& g_;
};

std::vector<std::string> split_assignment(std::size_t n, Rng& rng) {
  std::vector<std::string> split(n);
  for (auto& s : split) {
    const double u = rng.uniform();
    s = u < 0.8 ? "train" : (u < 0.9 ? "valid" : "test");
  }
  return split;
}

}  // namespace

std::string sample_smiles(Rng& rng, const SmilesGrammar& grammar) {
  if (grammar.min_atoms == 0 || grammar.max_atoms < grammar.min_atoms) {
    throw std::invalid_argument("grammar atom range is empty");
  }
  const bool halogen = rng.uniform() < grammar.halogen_prob;
  return Builder(rng, grammar).molecule(halogen);
}

std::vector<std::string> synthetic_corpus(std::size_t min_tokens, std::uint64_t seed, const SmilesGrammar& grammar) {
  Rng rng(derive_seed(seed, "corpus"));
  std::vector<std::string> lines;
  std::size_t tokens = 0;
  while (tokens < min_tokens) {
    lines.push_back(sample_smiles(rng, grammar));
    tokens += split_smiles(lines.back()).size();
  }
  return lines;
}

std::vector<ToyRow> toy_classification_task(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy-classification"));
  SmilesGrammar g;
  std::vector<ToyRow> rows;
  auto split = split_assignment(n, rng);
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = (i % 2) == 0;
    rows.push_back({Builder(rng, g).molecule(positive), split[i], {positive ? "1" : "0"}});
  }
  return rows;
}

std::vector<ToyRow> toy_regression_task(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy-regression"));
  SmilesGrammar g;
  std::vector<ToyRow> rows;
  auto split = split_assignment(n, rng);
  for (std::size_t i = 0; i < n; ++i) {
    auto smiles = sample_smiles(rng, g);
    std::size_t atoms = 0, hetero = 0;
    for (const auto& t : split_smiles(smiles)) {
      const char c = t[0] == '[' ? t[1] : t[0];
      if (!std::isalpha(static_cast<unsigned char>(c))) continue;
      ++atoms;
      if (std::string_view("NOSnos").find(c) != std::string_view::npos) ++hetero;
    }
    const double frac = static_cast<double>(hetero) / static_cast<double>(atoms);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", frac);
    rows.push_back({std::move(smiles), split[i], {buf}});
  }
  return rows;
}

std::string toy_task_csv(const std::vector<ToyRow>& rows, const std::vector<std::string>& target_names) {
  std::string out = "smiles,split";
  for (const auto& t : target_names) out += "," + t;
  out += "\n";
  for (const auto& r : rows) {
    if (r.labels.size() != target_names.size()) throw std::invalid_argument("toy row label count mismatch");
    out += r.smiles + "," + r.split;
    for (const auto& l : r.labels) out += "," + l;
    out += "\n";
  }
  return out;
}

}  // namespace clm
