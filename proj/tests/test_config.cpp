#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "emim/config.hpp"

using namespace emim;

TEST_CASE("config: key=value parsing") {
  std::istringstream in("# comment\n\ngen.num_samples = 12\ntrain.pbt=true  # inline\n");
  const KeyValues kv = parse_key_values(in, "test");
  REQUIRE(kv.size() == 2);
  CHECK(kv[0] == std::pair<std::string, std::string>{"gen.num_samples", "12"});
  CHECK(kv[1].second == "true");
  std::istringstream bad("no equals sign\n");
  CHECK_THROWS_AS(parse_key_values(bad, "test"), ConfigError);
}

TEST_CASE("config: overrides and errors name the key") {
  const Settings s = load_settings(std::nullopt, {"gen.num_samples=8", "mask.kind=hmp", "gen.dims=8,8,8"});
  CHECK(s.gen.num_samples == 8);
  CHECK(s.train.mask.kind == MaskKind::hmp);
  try {
    load_settings(std::nullopt, {"gen.bogus=1"});
    FAIL("expected error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "gen.bogus");
    CHECK(std::string(e.what()).find("gen.bogus") != std::string::npos);
  }
  try {
    load_settings(std::nullopt, {"train.steps=abc"});
    FAIL("expected error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "train.steps");
  }
  CHECK_THROWS_AS(load_settings(std::nullopt, {"hmp.patch_min_visible=3"}), ConfigError);
}

TEST_CASE("config: file then overrides, round trip through text") {
  const auto path = std::filesystem::temp_directory_path() / "emim_test_config.txt";
  {
    std::ofstream f(path);
    f << "train.steps=50\ntrain.lr=0.001\n";
  }
  const Settings s = load_settings(path, {"train.steps=60"});
  CHECK(s.train.steps == 60);
  CHECK(s.train.adam.learning_rate == 0.001);
  std::vector<std::string> all;
  for (const auto& [k, v] : to_key_values(s)) all.push_back(k + "=" + v);
  const Settings back = load_settings(std::nullopt, all);
  CHECK(to_key_values(back) == to_key_values(s));
  CHECK(to_key_values(s).size() == config_keys().size());
  std::filesystem::remove(path);
}
