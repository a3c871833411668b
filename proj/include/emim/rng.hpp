#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace emim {

/// Seeded random stream with platform-independent output.
///
/// Wraps std::mt19937_64 (whose sequence is fixed by the standard) and
/// implements its own distributions, since the std:: distributions are
/// allowed to differ between library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream derived from a master seed and a stream index.
  static Rng stream(std::uint64_t master_seed, std::uint64_t index);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  /// Standard normal (Box-Muller, one cached value).
  double normal();

  /// k distinct indices from [0, n), uniformly without replacement, in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer, used to decorrelate derived seeds.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace emim
