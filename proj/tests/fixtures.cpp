#include "fixtures.hpp"

namespace fixture {

double exhaustive_random_variance(const std::vector<emim::MultiModalVolume>& vs, emim::PatchSize patch,
                                  std::size_t k) {
  const std::size_t C = vs.front().num_modalities();
  const emim::Dims3 dims = vs.front().dims();
  const std::size_t m = vs.front().size();
  std::vector<double> mean(m, 0.0);
  for (const auto& v : vs)
    for (std::size_t i = 0; i < m; ++i) mean[i] += v.data()[i] / static_cast<double>(vs.size());

  const std::size_t gw = dims.w / patch.pw, gd = dims.d / patch.pd;
  const std::size_t n = emim::num_positions(dims, patch);
  auto position = [&](std::size_t x, std::size_t y, std::size_t z) {
    return ((x / patch.ph) * gw + y / patch.pw) * gd + z / patch.pd;
  };

  double total = 0.0;
  std::size_t pairs = 0;
  for (std::uint64_t subset = 0; subset < (1ull << n); ++subset) {
    if (static_cast<std::size_t>(__builtin_popcountll(subset)) != k) continue;
    for (const auto& v : vs) {
      double se = 0.0;
      std::size_t count = 0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t x = 0; x < dims.h; ++x)
          for (std::size_t y = 0; y < dims.w; ++y)
            for (std::size_t z = 0; z < dims.d; ++z) {
              if (!((subset >> position(x, y, z)) & 1)) continue;
              const std::size_t i = v.index(c, x, y, z);
              se += (v.data()[i] - mean[i]) * (v.data()[i] - mean[i]);
              ++count;
            }
      total += se / static_cast<double>(count);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

}  // namespace fixture
