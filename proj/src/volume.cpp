#include "emim/volume.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "emim/rng.hpp"
#include "emim/text.hpp"

namespace emim {

namespace {

void check_values(std::span<const float> data) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float v = data[i];
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw VolumeError("volume value at flat index " + std::to_string(i) +
                        " is outside [0, 1]: " + format_double(v));
    }
  }
}

void check_shape(std::size_t channels, Dims3 dims) {
  if (channels == 0) throw VolumeError("volume needs at least one modality");
  if (dims.h == 0 || dims.w == 0 || dims.d == 0) {
    throw VolumeError("volume dimensions must be positive");
  }
}

}  // namespace

MultiModalVolume::MultiModalVolume(std::size_t num_modalities, Dims3 dims, float fill)
    : channels_(num_modalities), dims_(dims) {
  check_shape(num_modalities, dims);
  if (!std::isfinite(fill) || fill < 0.0f || fill > 1.0f) {
    throw VolumeError("fill value outside [0, 1]");
  }
  data_.assign(num_modalities * dims.count(), fill);
}

MultiModalVolume::MultiModalVolume(std::size_t num_modalities, Dims3 dims,
                                   std::vector<float> data)
    : channels_(num_modalities), dims_(dims), data_(std::move(data)) {
  check_shape(num_modalities, dims);
  if (data_.size() != num_modalities * dims.count()) {
    throw VolumeError("volume payload has " + std::to_string(data_.size()) +
                      " values, expected " + std::to_string(num_modalities * dims.count()));
  }
  check_values(data_);
}

// ---------------------------------------------------------------------------

std::size_t num_positions(Dims3 dims, PatchSize patch) {
  const std::array<std::pair<const char*, std::pair<std::size_t, std::size_t>>, 3> axes{{
      {"H", {dims.h, patch.ph}},
      {"W", {dims.w, patch.pw}},
      {"D", {dims.d, patch.pd}},
  }};
  std::size_t n = 1;
  for (const auto& [name, sizes] : axes) {
    const auto [extent, step] = sizes;
    if (step == 0) throw VolumeError(std::string("patch size along ") + name + " must be positive");
    if (extent % step != 0) {
      throw VolumeError(std::string("axis ") + name + " of length " + std::to_string(extent) +
                        " is not divisible by patch size " + std::to_string(step));
    }
    n *= extent / step;
  }
  return n;
}

PatchGrid::PatchGrid(std::size_t num_modalities, Dims3 dims, PatchSize patch,
                     std::vector<float> data)
    : channels_(num_modalities), dims_(dims), patch_(patch), data_(std::move(data)) {
  emim::num_positions(dims, patch);
  grid_ = {dims.h / patch.ph, dims.w / patch.pw, dims.d / patch.pd};
  if (data_.size() != channels_ * dims.count()) throw VolumeError("patch grid payload size mismatch");
}

std::span<const float> PatchGrid::block(std::size_t position, std::size_t modality) const {
  const std::size_t v = patch_.voxels();
  return std::span<const float>(data_).subspan((position * channels_ + modality) * v, v);
}

std::span<const float> PatchGrid::row(std::size_t position) const {
  return std::span<const float>(data_).subspan(position * row_size(), row_size());
}

namespace {

// Calls f(flat volume index, flat patch-major index) for every voxel.
template <typename F>
void for_each_voxel(std::size_t channels, Dims3 dims, PatchSize p, F&& f) {
  const Dims3 g{dims.h / p.ph, dims.w / p.pw, dims.d / p.pd};
  const std::size_t v = p.voxels();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t x = 0; x < dims.h; ++x)
      for (std::size_t y = 0; y < dims.w; ++y)
        for (std::size_t z = 0; z < dims.d; ++z) {
          const std::size_t pos = ((x / p.ph) * g.w + (y / p.pw)) * g.d + (z / p.pd);
          const std::size_t local = ((x % p.ph) * p.pw + (y % p.pw)) * p.pd + (z % p.pd);
          const std::size_t vol_idx = ((c * dims.h + x) * dims.w + y) * dims.d + z;
          f(vol_idx, (pos * channels + c) * v + local);
        }
}

}  // namespace

PatchGrid partition(const MultiModalVolume& volume, PatchSize patch) {
  num_positions(volume.dims(), patch);
  const auto src = volume.data();
  std::vector<float> out(src.size());
  for_each_voxel(volume.num_modalities(), volume.dims(), patch,
                 [&](std::size_t vi, std::size_t pi) { out[pi] = src[vi]; });
  return PatchGrid(volume.num_modalities(), volume.dims(), patch, std::move(out));
}

MultiModalVolume reassemble(const PatchGrid& grid) {
  const auto src = grid.data();
  std::vector<float> out(src.size());
  for_each_voxel(grid.num_modalities(), grid.dims(), grid.patch_size(),
                 [&](std::size_t vi, std::size_t pi) { out[vi] = src[pi]; });
  return MultiModalVolume(grid.num_modalities(), grid.dims(), std::move(out));
}

std::vector<double> patches_to_volume_layout(std::span<const double> patch_major,
                                             std::size_t num_modalities, Dims3 dims,
                                             PatchSize patch) {
  num_positions(dims, patch);
  if (patch_major.size() != num_modalities * dims.count()) {
    throw VolumeError("patch-major buffer size mismatch");
  }
  std::vector<double> out(patch_major.size());
  for_each_voxel(num_modalities, dims, patch,
                 [&](std::size_t vi, std::size_t pi) { out[vi] = patch_major[pi]; });
  return out;
}

// ---------------------------------------------------------------------------
// Generator

std::vector<double> default_modality_offsets(std::size_t num_modalities) {
  std::vector<double> offsets(num_modalities);
  for (std::size_t c = 0; c < num_modalities; ++c) {
    offsets[c] = num_modalities == 1 ? 0.3 : 0.1 + 0.4 * static_cast<double>(c) /
                                                     static_cast<double>(num_modalities - 1);
  }
  return offsets;
}

void validate(const SyntheticDatasetConfig& config) {
  if (config.num_samples == 0) throw VolumeError("gen.num_samples must be positive");
  check_shape(config.num_modalities, config.dims);
  if (!(config.diversity >= 0.0) || !std::isfinite(config.diversity)) {
    throw VolumeError("gen.diversity must be a finite value >= 0");
  }
  if (!(config.lesion_fraction >= 0.0 && config.lesion_fraction <= 1.0)) {
    throw VolumeError("gen.lesion_fraction must lie in [0, 1]");
  }
  if (!(config.lesion_probability >= 0.0 && config.lesion_probability <= 1.0)) {
    throw VolumeError("gen.lesion_probability must lie in [0, 1]");
  }
  if (config.perturbation_cell == 0) throw VolumeError("gen.perturbation_cell must be positive");
  if (!config.modality_offsets.empty()) {
    if (config.modality_offsets.size() != config.num_modalities) {
      throw VolumeError("gen.modality_offsets needs one value per modality");
    }
    for (double o : config.modality_offsets) {
      if (!(o >= 0.0 && o <= 1.0)) throw VolumeError("gen.modality_offsets must lie in [0, 1]");
    }
  }
}

namespace {

constexpr double kAnatomyContrast = 0.3;
constexpr double kLesionIntensity = 0.3;
constexpr double kLesionEdge = 0.5;

// Per-modality response to the shared perturbation and to the lesion.
double perturbation_gain(std::size_t c) {
  static constexpr std::array<double, 4> g{1.0, 0.8, 1.2, 0.9};
  return g[c % g.size()];
}
double lesion_gain(std::size_t c) {
  static constexpr std::array<double, 4> g{1.0, 0.7, 1.3, 0.55};
  return g[c % g.size()];
}

struct Template {
  std::vector<double> values;  // (c, x, y, z)
};

Template make_template(const SyntheticDatasetConfig& cfg, const std::vector<double>& offsets) {
  const Dims3 d = cfg.dims;
  Template t;
  t.values.resize(cfg.num_modalities * d.count());
  const double cx = 0.5 * static_cast<double>(d.h - 1);
  const double cy = 0.5 * static_cast<double>(d.w - 1);
  const double cz = 0.5 * static_cast<double>(d.d - 1);
  std::size_t k = 0;
  for (std::size_t c = 0; c < cfg.num_modalities; ++c) {
    const double radius = 0.55 + 0.08 * static_cast<double>(c % 4);
    for (std::size_t x = 0; x < d.h; ++x)
      for (std::size_t y = 0; y < d.w; ++y)
        for (std::size_t z = 0; z < d.d; ++z) {
          const double rx = (static_cast<double>(x) - cx) / (0.5 * static_cast<double>(d.h));
          const double ry = (static_cast<double>(y) - cy) / (0.5 * static_cast<double>(d.w));
          const double rz = (static_cast<double>(z) - cz) / (0.5 * static_cast<double>(d.d));
          const double r = std::sqrt(rx * rx + ry * ry + rz * rz) / radius;
          const double falloff = 1.0 / (1.0 + r * r * r * r);
          t.values[k++] = offsets[c] + kAnatomyContrast * falloff;
        }
  }
  return t;
}

double lesion_center(Rng& rng, std::size_t extent, double radius) {
  const double lo = radius;
  const double hi = static_cast<double>(extent) - 1.0 - radius;
  if (hi <= lo) return 0.5 * static_cast<double>(extent - 1);
  return lo + (hi - lo) * rng.uniform();
}

}  // namespace

LabeledDataset generate_labeled_dataset(const SyntheticDatasetConfig& config) {
  validate(config);
  const std::vector<double> offsets =
      config.modality_offsets.empty() ? default_modality_offsets(config.num_modalities)
                                      : config.modality_offsets;
  const Template tmpl = make_template(config, offsets);
  const Dims3 d = config.dims;
  const std::size_t cell = config.perturbation_cell;
  const Dims3 cells{(d.h + cell - 1) / cell, (d.w + cell - 1) / cell, (d.d + cell - 1) / cell};
  const double lesion_voxels = config.lesion_fraction * static_cast<double>(d.count());
  const double lesion_radius = std::cbrt(3.0 * lesion_voxels / (4.0 * M_PI));

  LabeledDataset out;
  out.volumes.reserve(config.num_samples);
  out.labels.reserve(config.num_samples);
  for (std::size_t s = 0; s < config.num_samples; ++s) {
    Rng rng = Rng::stream(config.seed, s);
    const bool has_lesion = config.lesion_fraction > 0.0 && rng.uniform() < config.lesion_probability;
    const double lx = lesion_center(rng, d.h, lesion_radius);
    const double ly = lesion_center(rng, d.w, lesion_radius);
    const double lz = lesion_center(rng, d.d, lesion_radius);
    std::vector<double> noise(cells.count());
    for (double& v : noise) v = config.diversity * rng.normal();

    std::vector<float> data(tmpl.values.size());
    std::size_t k = 0;
    for (std::size_t c = 0; c < config.num_modalities; ++c)
      for (std::size_t x = 0; x < d.h; ++x)
        for (std::size_t y = 0; y < d.w; ++y)
          for (std::size_t z = 0; z < d.d; ++z, ++k) {
            double v = tmpl.values[k];
            v += perturbation_gain(c) *
                 noise[((x / cell) * cells.w + (y / cell)) * cells.d + (z / cell)];
            if (has_lesion) {
              const double dx = static_cast<double>(x) - lx;
              const double dy = static_cast<double>(y) - ly;
              const double dz = static_cast<double>(z) - lz;
              const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
              v += kLesionIntensity * lesion_gain(c) / (1.0 + std::exp((r - lesion_radius) / kLesionEdge));
            }
            data[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
    out.volumes.emplace_back(config.num_modalities, d, std::move(data));
    out.labels.push_back(has_lesion ? 1 : 0);
  }
  return out;
}

std::vector<MultiModalVolume> generate_dataset(const SyntheticDatasetConfig& config) {
  return generate_labeled_dataset(config).volumes;
}

KeyValues to_key_values(const SyntheticDatasetConfig& config) {
  KeyValues kv;
  kv.emplace_back("gen.num_samples", std::to_string(config.num_samples));
  kv.emplace_back("gen.num_modalities", std::to_string(config.num_modalities));
  kv.emplace_back("gen.dims", std::to_string(config.dims.h) + "," + std::to_string(config.dims.w) +
                                  "," + std::to_string(config.dims.d));
  kv.emplace_back("gen.diversity", format_double(config.diversity));
  std::string offsets;
  for (std::size_t i = 0; i < config.modality_offsets.size(); ++i) {
    if (i) offsets += ",";
    offsets += format_double(config.modality_offsets[i]);
  }
  kv.emplace_back("gen.modality_offsets", offsets);
  kv.emplace_back("gen.lesion_fraction", format_double(config.lesion_fraction));
  kv.emplace_back("gen.lesion_probability", format_double(config.lesion_probability));
  kv.emplace_back("gen.perturbation_cell", std::to_string(config.perturbation_cell));
  kv.emplace_back("gen.seed", std::to_string(config.seed));
  return kv;
}

// ---------------------------------------------------------------------------
// MMV1

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'M', 'M', 'V', '1'};
constexpr std::size_t kHeaderBytes = 20;
// Payloads above 2^31 floats are rejected as dimension overflow.
constexpr std::uint64_t kMaxValues = std::uint64_t{1} << 31;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) |
         (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const MultiModalVolume& volume) {
  const Dims3 d = volume.dims();
  const auto fits = [](std::size_t v) { return v <= std::numeric_limits<std::uint32_t>::max(); };
  if (!fits(volume.num_modalities()) || !fits(d.h) || !fits(d.w) || !fits(d.d)) {
    throw VolumeFormatError(FormatErrc::dimension_overflow, "volume dimension exceeds u32");
  }
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.reserve(kHeaderBytes + 4 * volume.size());
  put_u32(out, static_cast<std::uint32_t>(volume.num_modalities()));
  put_u32(out, static_cast<std::uint32_t>(d.h));
  put_u32(out, static_cast<std::uint32_t>(d.w));
  put_u32(out, static_cast<std::uint32_t>(d.d));
  for (float v : volume.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

MultiModalVolume decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw VolumeFormatError(FormatErrc::bad_magic, "not an MMV1 volume (bad magic)");
  }
  if (bytes.size() < kHeaderBytes) {
    throw VolumeFormatError(FormatErrc::truncated, "MMV1 header truncated");
  }
  const std::uint64_t c = get_u32(bytes, 4);
  const std::uint64_t h = get_u32(bytes, 8);
  const std::uint64_t w = get_u32(bytes, 12);
  const std::uint64_t dd = get_u32(bytes, 16);
  if (c == 0 || h == 0 || w == 0 || dd == 0) {
    throw VolumeFormatError(FormatErrc::invalid_values, "MMV1 header declares a zero dimension");
  }
  // Each factor is < 2^32, so overflow is detected one multiplication at a time.
  std::uint64_t count = c;
  for (std::uint64_t f : {h, w, dd}) {
    if (count > kMaxValues / f) {
      throw VolumeFormatError(FormatErrc::dimension_overflow, "MMV1 header dimensions overflow");
    }
    count *= f;
  }
  if (count > kMaxValues) {
    throw VolumeFormatError(FormatErrc::dimension_overflow, "MMV1 header dimensions overflow");
  }
  const std::uint64_t expected = kHeaderBytes + 4 * count;
  if (bytes.size() != expected) {
    throw VolumeFormatError(FormatErrc::truncated,
                            "MMV1 payload length " + std::to_string(bytes.size() - kHeaderBytes) +
                                " bytes does not match header (" + std::to_string(4 * count) + ")");
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
  }
  try {
    return MultiModalVolume(c, Dims3{h, w, dd}, std::move(data));
  } catch (const VolumeError& e) {
    throw VolumeFormatError(FormatErrc::invalid_values, e.what());
  }
}

void save_volume(const MultiModalVolume& volume, const std::filesystem::path& path) {
  const auto bytes = encode_volume(volume);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw VolumeFormatError(FormatErrc::io_error, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw VolumeFormatError(FormatErrc::io_error, "write failed for " + path.string());
}

MultiModalVolume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeFormatError(FormatErrc::io_error, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_volume(bytes);
}

// ---------------------------------------------------------------------------
// Dataset directories

void save_dataset(const std::filesystem::path& dir, const LabeledDataset& data,
                  const KeyValues& config) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "# emim dataset manifest\n";
  for (const auto& [k, v] : config) manifest << k << '=' << v << '\n';
  for (std::size_t i = 0; i < data.volumes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04zu.mmv", i);
    save_volume(data.volumes[i], dir / name);
    manifest << "file=" << name << '\n';
    if (i < data.labels.size()) manifest << "lesion=" << data.labels[i] << '\n';
  }
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw VolumeFormatError(FormatErrc::io_error, "cannot write manifest in " + dir.string());
  out << manifest.str();
}

DatasetOnDisk load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw VolumeFormatError(FormatErrc::io_error, "no manifest in " + dir.string());
  DatasetOnDisk out;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw VolumeFormatError(FormatErrc::invalid_values, "malformed manifest line: " + std::string(t));
    }
    const std::string key(trim(t.substr(0, eq)));
    const std::string value(trim(t.substr(eq + 1)));
    if (key == "file") {
      out.files.push_back(value);
      out.volumes.push_back(load_volume(dir / value));
    } else if (key == "lesion") {
      out.labels.push_back(value == "1" ? 1 : 0);
    } else {
      out.config.emplace_back(key, value);
    }
  }
  if (!out.labels.empty() && out.labels.size() != out.volumes.size()) {
    throw VolumeFormatError(FormatErrc::invalid_values, "manifest label count differs from file count");
  }
  return out;
}

}  // namespace emim
