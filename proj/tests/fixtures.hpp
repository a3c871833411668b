#pragma once

#include <vector>

#include "emim/rng.hpp"
#include "emim/volume.hpp"

namespace fixture {

/// Volumes with independent uniform voxels.
inline std::vector<emim::MultiModalVolume> uniform_volumes(std::size_t count, std::size_t C, emim::Dims3 dims,
                                                          std::uint64_t seed) {
  emim::Rng rng(seed);
  std::vector<emim::MultiModalVolume> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<float> data(C * dims.count());
    for (float& x : data) x = static_cast<float>(rng.uniform());
    out.emplace_back(C, dims, std::move(data));
  }
  return out;
}

/// Exhaustive masked variance over every (volume, k-of-n position subset)
/// pair, masking every modality at the chosen positions.
double exhaustive_random_variance(const std::vector<emim::MultiModalVolume>& vs, emim::PatchSize patch,
                                  std::size_t k);

}  // namespace fixture
