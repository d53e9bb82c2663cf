#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace clm {

// Seeded random source whose output is identical on every platform. The
// engine is mt19937_64 (fully specified by the standard); the distribution
// mappings are written out here because the standard library's are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), rejection sampled so there is no modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  // Normal with stddev `stddev`, redrawn until it lies within 2 stddev.
  double truncated_normal(double stddev);

  std::uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent seed streams.
std::uint64_t mix64(std::uint64_t x);

// Derives a child seed from a parent seed, a stream label and an index.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view stream, std::uint64_t index = 0);

}  // namespace clm
