#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "xlt/tensor.hpp"

namespace xlt {

/// SplitMix64 finalizer. Used as a stateless counter-based generator.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

/// Uniform double in [0, 1) drawn from a counter key.
constexpr double counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t stream,
                                 std::uint64_t index) {
  const std::uint64_t h = hash_combine(hash_combine(hash_combine(seed, step), stream), index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Derives an independent seed for a named purpose from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t purpose) {
  return hash_combine(base, purpose * 0x2545f4914f6cdd1dULL + 1);
}

using Rng = std::mt19937_64;

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

/// Fisher-Yates shuffle driven by an explicit generator. std::shuffle's
/// algorithm is implementation-defined; this one is not.
template <typename T>
void deterministic_shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace xlt
