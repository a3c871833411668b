#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "emim/train.hpp"
#include "emim/volume.hpp"

namespace emim {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct VarSweepConfig {
  std::size_t draws = 20000;
  std::vector<double> ratios{0.25, 0.5, 0.75};
  std::uint64_t seed = 0;
};

/// Everything a CLI invocation can configure.
struct Settings {
  SyntheticDatasetConfig gen{};
  TrainConfig train{};
  ProbeConfig probe{};
  VarSweepConfig var{};
  /// Seed for mask-preview.
  std::uint64_t mask_seed = 0;
};

struct KeyInfo {
  std::string key;
  std::string help;
};

/// Every accepted key, in help order.
const std::vector<KeyInfo>& config_keys();

/// Reads "key=value" lines; '#' starts a comment, blank lines are skipped.
KeyValues parse_key_values(std::istream& in, const std::string& source);

/// Applies one key; throws ConfigError naming the key when it is unknown or
/// its value is invalid.
void apply_setting(Settings& settings, const std::string& key, const std::string& value);

/// Defaults, then the file (if any), then `overrides` ("key=value" strings).
Settings load_settings(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

/// Cross-field checks (HMP feasibility, model shape); throws ConfigError.
void validate(const Settings& settings);

/// Current values of every key in config_keys() order.
KeyValues to_key_values(const Settings& settings);

}  // namespace emim
