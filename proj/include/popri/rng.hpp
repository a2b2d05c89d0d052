#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <vector>

#include "popri/errors.hpp"

namespace popri {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

// Deterministic xoshiro256++ stream. All randomness in the simulator flows
// through this class so runs are byte-reproducible across platforms; the
// standard library distributions are avoided on purpose (their output is
// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = detail::splitmix64(sm);
  }

  // Derives an independent child stream. Streams for (round, client) pairs
  // are derived from stable tags so parallel evaluation order cannot change
  // results.
  Rng derive(std::initializer_list<std::uint64_t> tags) const {
    std::uint64_t h = s_[0] ^ detail::rotl(s_[1], 17) ^ detail::rotl(s_[2], 31) ^ s_[3];
    for (std::uint64_t t : tags) {
      std::uint64_t mix = t;
      h ^= detail::splitmix64(mix) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return Rng(h);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (cosine branch only).
  double gaussian() {
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Draws an index from an explicit probability vector (entries sum to ~1).
  std::size_t categorical(std::span<const double> probs) {
    const double u = uniform();
    double cum = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) last_positive = i;
      cum += probs[i];
      if (u < cum) return i;
    }
    return last_positive;  // guards the u ~ 1 rounding edge
  }

  // Partial Fisher-Yates: k distinct values from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k > n) throw ConfigError("cannot sample " + std::to_string(k) + " of " + std::to_string(n));
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

 private:
  std::uint64_t s_[4];
};

// Stable stream tags; combined with round/client indices in Rng::derive.
namespace stream {
constexpr std::uint64_t kCorpus = 0x01;
constexpr std::uint64_t kGenerate = 0x02;
constexpr std::uint64_t kClientSample = 0x03;
constexpr std::uint64_t kNoise = 0x04;
constexpr std::uint64_t kSynthesis = 0x05;
constexpr std::uint64_t kTruth = 0x06;
constexpr std::uint64_t kSplit = 0x07;
constexpr std::uint64_t kVariation = 0x08;
constexpr std::uint64_t kInit = 0x09;
}  // namespace stream

}  // namespace popri
