#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace lesionforge {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds a run seed and a list of stream coordinates (iteration, sample
/// index, purpose tag, ...) into an independent 64-bit seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t s : stream) h = splitmix64(h ^ splitmix64(s + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
  return Rng(derive_seed(seed, stream));
}

template <class T>
void fill_normal(std::span<T> out, Rng& rng, T mean = T(0), T stddev = T(1)) {
  std::normal_distribution<T> dist(mean, stddev);
  for (T& v : out) v = dist(rng);
}

template <class T>
void fill_uniform(std::span<T> out, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<T> dist(lo, hi);
  for (T& v : out) v = dist(rng);
}

// Purpose tags keep derived streams of one run apart.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kLatent = 2;
inline constexpr std::uint64_t kBatch = 3;
inline constexpr std::uint64_t kSwd = 4;
inline constexpr std::uint64_t kStudy = 5;
inline constexpr std::uint64_t kBlob = 6;
inline constexpr std::uint64_t kEval = 7;
}  // namespace stream

}  // namespace lesionforge
