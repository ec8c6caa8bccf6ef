#pragma once

#include <cstdint>
#include <array>
#include <cstddef>
#include <string_view>
#include <vector>

namespace spem {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
//
// State is a 128-bit counter and a 64-bit key; each block invocation
// produces four independent 32-bit words. Because the output is a pure
// function of (key, counter), streams can be split without coordination:
//
//   key       = splitmix64(user seed)            (whitens weak seeds)
//   counter   = [block_lo, block_hi, stream_lo, stream_hi]
//
// The stream id occupies the high counter words, so every (seed, stream)
// pair yields a disjoint sequence of 2^64 blocks. Per-sample generators
// use the sample index as the stream, which makes batch scoring
// order-independent: sample i consumes the same draws no matter which
// worker evaluates it or in which order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  // Stream derived from a purpose tag and a sample index. Distinct tags
  // decouple consumers that share one user-facing seed.
  static Rng for_sample(std::uint64_t seed, std::string_view purpose,
                        std::uint64_t sample_index);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform in [0, 1), 53 usable bits.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal via the inverse CDF. One uniform consumed per draw,
  // so consumption order is unambiguous across platforms.
  double normal();
  double normal(double mean, double stddev);

  // Uniform index in [0, n). n must be positive.
  std::size_t uniform_index(std::size_t n);

  // In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = uniform_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::array<std::uint32_t, 4> counter_;
  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 4> block_{};
  int block_pos_ = 4;  // forces a refill on first use

  void refill();
};

// Raw Philox4x32-10 block function, exposed for the known-answer tests.
std::array<std::uint32_t, 4> philox4x32(const std::array<std::uint32_t, 4>& counter,
                                        const std::array<std::uint32_t, 2>& key);

// SplitMix64 finalizer; used to whiten seeds and mix purpose tags.
std::uint64_t splitmix64(std::uint64_t x);

// FNV-1a over a byte view; used for purpose tags and format fingerprints.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(std::string_view s);

// Inverse of the standard normal CDF (Wichura's AS241, PPND16).
// Accurate to about 1e-15 for p in (0, 1); throws outside.
double inverse_normal_cdf(double p);

}  // namespace spem
