#include "mfldiv/rng.hpp"

#include <cmath>
#include <numbers>

namespace mfldiv {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RngKey CounterRng::key(Phase phase, std::uint64_t outer, std::uint64_t inner,
                       std::uint64_t index) const {
  std::uint64_t h = mix64(seed_);
  h = mix64(h ^ static_cast<std::uint64_t>(phase));
  h = mix64(h ^ outer);
  h = mix64(h ^ inner);
  h = mix64(h ^ index);
  return RngKey{h};
}

std::uint64_t CounterRng::bits(RngKey key, std::uint64_t counter) const {
  return mix64(key.value ^ mix64(counter + 0x632be59bd9b4e019ULL));
}

double CounterRng::uniform(RngKey key, std::uint64_t counter) const {
  // 53 random bits, shifted off zero.
  return (static_cast<double>(bits(key, counter) >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal(RngKey key, std::uint64_t counter) const {
  const double u1 = uniform(key, 2 * counter);
  const double u2 = uniform(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void CounterRng::fill_normal(RngKey key, std::span<double> out) const {
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = normal(key, k);
}

std::uint64_t CounterRng::below(RngKey key, std::uint64_t counter, std::uint64_t n) const {
  // Lemire's multiply-shift; bias is < n / 2^64 and irrelevant at our sizes.
  const unsigned __int128 prod = static_cast<unsigned __int128>(bits(key, counter)) * n;
  return static_cast<std::uint64_t>(prod >> 64);
}

}  // namespace mfldiv
