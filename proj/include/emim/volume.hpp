#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace emim {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct Dims3 {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t d = 0;

  std::size_t count() const { return h * w * d; }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

class VolumeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// C-modality voxel grid, stored as float in (c, x, y, z) row-major order.
/// Values are finite and in [0, 1].
class MultiModalVolume {
 public:
  MultiModalVolume() = default;
  /// Constant-filled volume.
  MultiModalVolume(std::size_t num_modalities, Dims3 dims, float fill = 0.0f);
  /// Takes ownership of `data`; validates size, finiteness and range.
  MultiModalVolume(std::size_t num_modalities, Dims3 dims, std::vector<float> data);

  std::size_t num_modalities() const { return channels_; }
  Dims3 dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const {
    return ((c * dims_.h + x) * dims_.w + y) * dims_.d + z;
  }
  float at(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const {
    return data_[index(c, x, y, z)];
  }
  std::span<const float> data() const { return data_; }

  friend bool operator==(const MultiModalVolume&, const MultiModalVolume&) = default;

 private:
  std::size_t channels_ = 0;
  Dims3 dims_{};
  std::vector<float> data_;
};

struct PatchSize {
  std::size_t ph = 4;
  std::size_t pw = 4;
  std::size_t pd = 4;

  std::size_t voxels() const { return ph * pw * pd; }
  friend bool operator==(const PatchSize&, const PatchSize&) = default;
};

/// Number of patch positions for a volume shape; throws VolumeError naming the
/// first axis that is not divisible.
std::size_t num_positions(Dims3 dims, PatchSize patch);

/// A volume cut into n = (H/ph)(W/pw)(D/pd) positions, each carrying C blocks.
///
/// Storage is [position][modality][local voxel], so row i of the n x (C*V)
/// matrix view is the flattened multi-modal patch at position i. Positions are
/// numbered (ix*gw + iy)*gd + iz, local voxels (lx*pw + ly)*pd + lz.
class PatchGrid {
 public:
  PatchGrid() = default;
  PatchGrid(std::size_t num_modalities, Dims3 dims, PatchSize patch, std::vector<float> data);

  std::size_t num_modalities() const { return channels_; }
  Dims3 dims() const { return dims_; }
  PatchSize patch_size() const { return patch_; }
  Dims3 grid() const { return grid_; }
  std::size_t num_positions() const { return grid_.count(); }
  std::size_t voxels_per_block() const { return patch_.voxels(); }
  /// Values per position across all modalities (C * V).
  std::size_t row_size() const { return channels_ * patch_.voxels(); }

  std::span<const float> block(std::size_t position, std::size_t modality) const;
  std::span<const float> row(std::size_t position) const;
  std::span<const float> data() const { return data_; }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;

 private:
  std::size_t channels_ = 0;
  Dims3 dims_{};
  PatchSize patch_{};
  Dims3 grid_{};
  std::vector<float> data_;
};

PatchGrid partition(const MultiModalVolume& volume, PatchSize patch);
MultiModalVolume reassemble(const PatchGrid& grid);

/// Maps a patch-major buffer (same layout as PatchGrid) back to (c, x, y, z)
/// order without range checks; used for model reconstructions.
std::vector<double> patches_to_volume_layout(std::span<const double> patch_major,
                                             std::size_t num_modalities, Dims3 dims,
                                             PatchSize patch);

// ---------------------------------------------------------------------------
// Synthetic low-diversity data

struct SyntheticDatasetConfig {
  std::size_t num_samples = 64;
  std::size_t num_modalities = 4;
  Dims3 dims{16, 16, 16};
  /// Scale of the per-sample perturbation (delta).
  double diversity = 0.05;
  /// Base intensity per modality; empty means the built-in ladder.
  std::vector<double> modality_offsets;
  /// Fraction of voxels covered by the lesion sphere.
  double lesion_fraction = 0.01;
  /// Probability that a sample carries a lesion at all.
  double lesion_probability = 1.0;
  /// Edge length (voxels) of the cubic cells the perturbation is constant on.
  std::size_t perturbation_cell = 2;
  std::uint64_t seed = 0;
};

/// Offsets used when SyntheticDatasetConfig::modality_offsets is empty.
std::vector<double> default_modality_offsets(std::size_t num_modalities);

void validate(const SyntheticDatasetConfig& config);

struct LabeledDataset {
  std::vector<MultiModalVolume> volumes;
  /// 1 when the sample carries a lesion.
  std::vector<int> labels;
};

LabeledDataset generate_labeled_dataset(const SyntheticDatasetConfig& config);
std::vector<MultiModalVolume> generate_dataset(const SyntheticDatasetConfig& config);

/// key=value lines (prefix "gen.") describing a generator config.
KeyValues to_key_values(const SyntheticDatasetConfig& config);

// ---------------------------------------------------------------------------
// Binary volume files: "MMV1" | u32 C | u32 H | u32 W | u32 D | f32 payload,
// little-endian, payload in (c, x, y, z) order.

enum class FormatErrc {
  io_error = 1,
  bad_magic,
  truncated,
  dimension_overflow,
  invalid_values,
};

class VolumeFormatError : public std::runtime_error {
 public:
  VolumeFormatError(FormatErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

std::vector<std::uint8_t> encode_volume(const MultiModalVolume& volume);
MultiModalVolume decode_volume(std::span<const std::uint8_t> bytes);

void save_volume(const MultiModalVolume& volume, const std::filesystem::path& path);
MultiModalVolume load_volume(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset directories: one MMV1 file per sample plus manifest.txt.

struct DatasetOnDisk {
  std::vector<MultiModalVolume> volumes;
  std::vector<int> labels;
  std::vector<std::string> files;
  KeyValues config;
};

inline constexpr const char* kManifestName = "manifest.txt";

void save_dataset(const std::filesystem::path& dir, const LabeledDataset& data,
                  const KeyValues& config);
DatasetOnDisk load_dataset(const std::filesystem::path& dir);

}  // namespace emim
