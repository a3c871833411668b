#include "emim/masking.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "emim/text.hpp"

namespace emim {

const char* to_string(MaskPhase phase) {
  switch (phase) {
    case MaskPhase::none: return "none";
    case MaskPhase::random: return "random";
    case MaskPhase::modal: return "modal";
    case MaskPhase::position: return "position";
    case MaskPhase::patch: return "patch";
  }
  return "?";
}

const char* to_string(MaskKind kind) { return kind == MaskKind::random ? "random" : "hmp"; }

BinaryMask::BinaryMask(std::size_t num_modalities, std::size_t num_positions, double mask_ratio)
    : channels_(num_modalities), positions_(num_positions), ratio_(mask_ratio),
      phases_(num_modalities * num_positions, MaskPhase::none) {}

bool BinaryMask::set(std::size_t modality, std::size_t position, MaskPhase phase) {
  if (modality >= channels_ || position >= positions_) throw MaskError("mask cell out of range");
  if (phase == MaskPhase::none) throw MaskError("cannot set a cell to phase none");
  MaskPhase& cell = phases_[modality * positions_ + position];
  if (cell != MaskPhase::none) return false;
  cell = phase;
  ++count_;
  return true;
}

std::size_t BinaryMask::masked_at(std::size_t position) const {
  std::size_t k = 0;
  for (std::size_t c = 0; c < channels_; ++c) k += masked(c, position) ? 1 : 0;
  return k;
}

namespace {

std::size_t rounded_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n)));
}

void check_ratio(double ratio, const char* name) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw MaskError(std::string(name) + " must lie in [0, 1]");
}

double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

}  // namespace

BinaryMask random_mask(std::size_t num_positions, std::size_t num_modalities, double ratio, Rng& rng) {
  check_ratio(ratio, "mask ratio");
  BinaryMask mask(num_modalities, num_positions, ratio);
  for (std::size_t i : rng.sample_without_replacement(num_positions, rounded_count(ratio, num_positions))) {
    for (std::size_t c = 0; c < num_modalities; ++c) mask.set(c, i, MaskPhase::random);
  }
  return mask;
}

void validate(const HmpConfig& config, std::size_t num_modalities) {
  if (!config.modal_enabled && !config.position_enabled && !config.patch_enabled) {
    throw MaskError("HMP needs at least one enabled phase");
  }
  check_ratio(config.position_ratio, "hmp.position_ratio");
  check_ratio(config.patch_positions_ratio, "hmp.patch_positions_ratio");
  if ((config.modal_enabled || config.patch_enabled) && num_modalities < 2) {
    throw MaskError("HMP modal and patch phases need at least two modalities");
  }
  if (config.patch_enabled) {
    if (config.patch_min_visible < 1) throw MaskError("hmp.patch_min_visible must be >= 1");
    // Modalities still visible when the patch phase runs.
    const std::size_t open = num_modalities - (config.modal_enabled ? 1 : 0);
    if (open < config.patch_min_visible + 1) {
      throw MaskError("HMP patch phase infeasible: " + std::to_string(open) +
                      " open modalities cannot keep " + std::to_string(config.patch_min_visible) +
                      " visible and mask at least one");
    }
  }
}

BinaryMask hmp_mask(std::size_t num_positions, std::size_t num_modalities, const HmpConfig& config,
                    Rng& rng) {
  validate(config, num_modalities);
  BinaryMask mask(num_modalities, num_positions);

  if (config.modal_enabled) {
    const auto chosen = static_cast<std::size_t>(rng.below(num_modalities));
    for (std::size_t i = 0; i < num_positions; ++i) mask.set(chosen, i, MaskPhase::modal);
  }

  if (config.position_enabled) {
    const std::size_t k = rounded_count(config.position_ratio, num_positions);
    for (std::size_t i : rng.sample_without_replacement(num_positions, k)) {
      for (std::size_t c = 0; c < num_modalities; ++c) mask.set(c, i, MaskPhase::position);
    }
  }

  if (config.patch_enabled) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < num_positions; ++i) {
      if (num_modalities - mask.masked_at(i) >= config.patch_min_visible + 1) eligible.push_back(i);
    }
    const std::size_t k = std::min(rounded_count(config.patch_positions_ratio, num_positions), eligible.size());
    for (std::size_t pick : rng.sample_without_replacement(eligible.size(), k)) {
      const std::size_t i = eligible[pick];
      std::vector<std::size_t> open;
      for (std::size_t c = 0; c < num_modalities; ++c)
        if (!mask.masked(c, i)) open.push_back(c);
      // Subset size drawn with weight C(u, s) makes the subset uniform over
      // all admissible subsets.
      const std::size_t max_size = open.size() - config.patch_min_visible;
      std::vector<double> weights(max_size);
      double total = 0.0;
      for (std::size_t s = 1; s <= max_size; ++s) total += weights[s - 1] = binomial(open.size(), s);
      double u = rng.uniform() * total;
      std::size_t size = max_size;
      for (std::size_t s = 1; s <= max_size; ++s) {
        if (u < weights[s - 1]) {
          size = s;
          break;
        }
        u -= weights[s - 1];
      }
      for (std::size_t j : rng.sample_without_replacement(open.size(), size)) {
        mask.set(open[j], i, MaskPhase::patch);
      }
    }
  }

  mask.set_mask_ratio(mask.realized_fraction());
  return mask;
}

BinaryMask MaskStrategy::draw(std::size_t num_positions, std::size_t num_modalities, Rng& rng) const {
  if (kind == MaskKind::random) return random_mask(num_positions, num_modalities, ratio, rng);
  return hmp_mask(num_positions, num_modalities, hmp, rng);
}

MaskedViews apply_mask(const PatchGrid& grid, const BinaryMask& mask) {
  if (mask.num_modalities() != grid.num_modalities() || mask.num_positions() != grid.num_positions()) {
    throw MaskError("mask shape (" + std::to_string(mask.num_modalities()) + "x" +
                    std::to_string(mask.num_positions()) + ") does not match patch grid (" +
                    std::to_string(grid.num_modalities()) + "x" + std::to_string(grid.num_positions()) + ")");
  }
  MaskedViews views;
  views.mask = mask;
  for (std::size_t i = 0; i < grid.num_positions(); ++i) {
    for (std::size_t c = 0; c < grid.num_modalities(); ++c) {
      const auto block = grid.block(i, c);
      MaskedPatch p{i, c, std::vector<float>(block.begin(), block.end())};
      (mask.masked(c, i) ? views.masked : views.unmasked).push_back(std::move(p));
    }
  }
  return views;
}

MultiModalVolume masked_fill(const MultiModalVolume& volume, const BinaryMask& mask, PatchSize patch,
                             float fill_value) {
  const std::size_t n = num_positions(volume.dims(), patch);
  if (mask.num_modalities() != volume.num_modalities() || mask.num_positions() != n) {
    throw MaskError("mask shape does not match volume");
  }
  const Dims3 d = volume.dims();
  const Dims3 g{d.h / patch.ph, d.w / patch.pw, d.d / patch.pd};
  std::vector<float> data(volume.data().begin(), volume.data().end());
  for (std::size_t c = 0; c < volume.num_modalities(); ++c)
    for (std::size_t x = 0; x < d.h; ++x)
      for (std::size_t y = 0; y < d.w; ++y)
        for (std::size_t z = 0; z < d.d; ++z) {
          const std::size_t pos = ((x / patch.ph) * g.w + (y / patch.pw)) * g.d + (z / patch.pd);
          if (mask.masked(c, pos)) data[volume.index(c, x, y, z)] = fill_value;
        }
  return MultiModalVolume(volume.num_modalities(), d, std::move(data));
}

void write_mask_text(std::ostream& out, const BinaryMask& mask, std::uint64_t seed) {
  out << mask.num_modalities() << ' ' << mask.num_positions() << ' ' << format_double(mask.mask_ratio())
      << ' ' << seed << '\n';
  for (std::size_t c = 0; c < mask.num_modalities(); ++c)
    for (std::size_t i = 0; i < mask.num_positions(); ++i)
      if (mask.masked(c, i)) out << c << ',' << i << '\n';
}

BinaryMask read_mask_text(std::istream& in, std::uint64_t* seed) {
  std::string header;
  if (!std::getline(in, header)) throw MaskError("mask text: missing header");
  std::istringstream hs(header);
  std::size_t channels = 0, positions = 0;
  std::string ratio_text;
  std::uint64_t s = 0;
  if (!(hs >> channels >> positions >> ratio_text >> s)) throw MaskError("mask text: malformed header");
  const auto ratio = parse_double(ratio_text);
  if (!ratio) throw MaskError("mask text: malformed ratio");
  BinaryMask mask(channels, positions, *ratio);
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto comma = t.find(',');
    const auto c = parse_u64(t.substr(0, comma));
    const auto i = comma == std::string_view::npos ? std::nullopt : parse_u64(t.substr(comma + 1));
    if (!c || !i) throw MaskError("mask text: malformed line '" + std::string(t) + "'");
    mask.set(*c, *i, MaskPhase::random);
  }
  if (seed) *seed = s;
  return mask;
}

}  // namespace emim
