#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "emim/rng.hpp"
#include "emim/volume.hpp"

namespace emim {

class MaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Which generator step set a bit. Overlaps are attributed to the earliest step.
enum class MaskPhase : std::uint8_t { none = 0, random, modal, position, patch };

const char* to_string(MaskPhase phase);

/// Per-(modality, position) mask; true means the block is hidden from the encoder.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t num_modalities, std::size_t num_positions, double mask_ratio = 0.0);

  std::size_t num_modalities() const { return channels_; }
  std::size_t num_positions() const { return positions_; }
  /// Target ratio the generator was asked for (random) or realized (HMP).
  double mask_ratio() const { return ratio_; }
  void set_mask_ratio(double ratio) { ratio_ = ratio; }

  bool masked(std::size_t modality, std::size_t position) const {
    return phases_[modality * positions_ + position] != MaskPhase::none;
  }
  MaskPhase phase(std::size_t modality, std::size_t position) const {
    return phases_[modality * positions_ + position];
  }
  /// Marks a cell; returns false (and keeps the earlier attribution) if it was already set.
  bool set(std::size_t modality, std::size_t position, MaskPhase phase);

  std::size_t count() const { return count_; }
  std::size_t masked_at(std::size_t position) const;
  bool fully_masked(std::size_t position) const { return masked_at(position) == channels_; }
  double realized_fraction() const {
    return static_cast<double>(count_) / static_cast<double>(channels_ * positions_);
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t positions_ = 0;
  double ratio_ = 0.0;
  std::size_t count_ = 0;
  std::vector<MaskPhase> phases_;
};

/// round(ratio * n) positions chosen uniformly; every modality masked at each.
BinaryMask random_mask(std::size_t num_positions, std::size_t num_modalities, double ratio, Rng& rng);

struct HmpConfig {
  bool modal_enabled = true;
  bool position_enabled = true;
  bool patch_enabled = true;
  double position_ratio = 0.5;
  double patch_positions_ratio = 0.25;
  std::size_t patch_min_visible = 1;
  std::uint64_t seed = 0;
};

void validate(const HmpConfig& config, std::size_t num_modalities);

/// Three-step hybrid mask: one whole modality, then whole positions, then a
/// complementary modality subset at further positions.
BinaryMask hmp_mask(std::size_t num_positions, std::size_t num_modalities, const HmpConfig& config,
                    Rng& rng);

enum class MaskKind { random, hmp };

const char* to_string(MaskKind kind);

/// A configured mask distribution that can be sampled repeatedly.
struct MaskStrategy {
  MaskKind kind = MaskKind::random;
  double ratio = 0.75;  // random masking only
  HmpConfig hmp{};

  BinaryMask draw(std::size_t num_positions, std::size_t num_modalities, Rng& rng) const;
};

struct MaskedPatch {
  std::size_t position = 0;
  std::size_t modality = 0;
  std::vector<float> voxels;

  friend bool operator==(const MaskedPatch&, const MaskedPatch&) = default;
};

/// x_u (visible blocks) and x_m (hidden blocks), both in (position, modality) order.
struct MaskedViews {
  std::vector<MaskedPatch> unmasked;
  std::vector<MaskedPatch> masked;
  BinaryMask mask;
};

MaskedViews apply_mask(const PatchGrid& grid, const BinaryMask& mask);

/// Replaces every voxel of each masked block by fill_value.
MultiModalVolume masked_fill(const MultiModalVolume& volume, const BinaryMask& mask, PatchSize patch,
                             float fill_value);

/// Text form: header "C n rho seed", then one "c,i" line per masked cell.
void write_mask_text(std::ostream& out, const BinaryMask& mask, std::uint64_t seed);
BinaryMask read_mask_text(std::istream& in, std::uint64_t* seed = nullptr);

}  // namespace emim
