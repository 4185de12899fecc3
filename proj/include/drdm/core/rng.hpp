#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace drdm {

/// Deterministic random stream. Streams are derived from a root seed plus a
/// stream name and index, so independent consumers (episode i, generator run,
/// sampler chain) reproduce regardless of execution order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Derive a named substream: hash(root, name, index) seeds a fresh engine.
  static Rng named(std::uint64_t root_seed, std::string_view stream,
                   std::uint64_t index = 0);

  /// Stable 64-bit mix used for stream derivation and config hashing.
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);
  static std::uint64_t hash_bytes(std::string_view bytes,
                                  std::uint64_t seed = 0x9e3779b97f4a7c15ull);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (cached spare), independent of any
  /// stdlib distribution implementation details.
  double normal();

  /// Uniform integer in [lo, hi] inclusive, rejection-sampled (unbiased).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(
          uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices from [0, n) in random order.
  std::vector<std::int64_t> sample_without_replacement(std::int64_t n,
                                                       std::int64_t k);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace drdm
