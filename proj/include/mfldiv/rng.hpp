#pragma once

#include <cstdint>
#include <span>

namespace mfldiv {

// Streams of the counter-based generator. Each draw is a pure function of
// (master seed, phase, outer, inner, index, coordinate).
enum class Phase : std::uint64_t {
  kInitX = 1,
  kInitZ = 2,
  kNoiseZ = 3,
  kNoiseTildeZ = 4,
  kNoiseX = 5,
  kBatchStage1 = 6,
  kBatchStage2 = 7,
  kBatchOuter = 8,
  kData = 9,
  kFeatures = 10,
  kPolicy = 11,
  kGeneric = 12,
};

std::uint64_t mix64(std::uint64_t x);

struct RngKey {
  std::uint64_t value = 0;
};

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  RngKey key(Phase phase, std::uint64_t outer = 0, std::uint64_t inner = 0,
             std::uint64_t index = 0) const;

  std::uint64_t bits(RngKey key, std::uint64_t counter) const;
  // Uniform on the open interval (0, 1).
  double uniform(RngKey key, std::uint64_t counter) const;
  double normal(RngKey key, std::uint64_t counter) const;
  void fill_normal(RngKey key, std::span<double> out) const;
  // Uniform integer in [0, n).
  std::uint64_t below(RngKey key, std::uint64_t counter, std::uint64_t n) const;

 private:
  std::uint64_t seed_;
};

// Sequential draws from one key; convenient for data generation.
class RngCursor {
 public:
  RngCursor(const CounterRng& rng, RngKey key) : rng_(&rng), key_(key) {}
  double uniform() { return rng_->uniform(key_, counter_++); }
  double normal() { return rng_->normal(key_, counter_++); }
  std::uint64_t below(std::uint64_t n) { return rng_->below(key_, counter_++, n); }

 private:
  const CounterRng* rng_;
  RngKey key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mfldiv
