#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace fieldrecon {

/// Seedable random stream built on std::mt19937_64.
///
/// The engine output is fully specified by the C++ standard; the uniform and
/// normal transforms are implemented here (53-bit mantissa uniform, polar-free
/// Box-Muller) so that datasets and chains are reproducible across standard
/// library implementations. Substreams are derived with SplitMix64 so that
/// `Rng::substream(seed, i)` is independent of how many values stream `i-1`
/// consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Seed for substream `index` of `seed` (history index, chain index, ...).
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);
  static Rng substream(std::uint64_t seed, std::uint64_t index) {
    return Rng(derive_seed(seed, index));
  }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();

  template <typename T>
  void fill_normal(std::span<T> out) {
    for (auto& v : out) v = static_cast<T>(normal());
  }

  /// Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fieldrecon
