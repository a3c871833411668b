#include "emim/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "emim/text.hpp"

namespace emim {

namespace {

struct Entry {
  std::string key;
  std::string help;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError(key, "invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  const auto r = parse_u64(trim(v));
  if (!r) bad(key, v, "a nonnegative integer");
  return *r;
}

std::size_t as_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(as_u64(key, v)); }

double as_double(const std::string& key, const std::string& v) {
  const auto r = parse_double(trim(v));
  if (!r || !std::isfinite(*r)) bad(key, v, "a finite number");
  return *r;
}

bool as_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "1" || t == "true" || t == "on" || t == "yes") return true;
  if (t == "0" || t == "false" || t == "off" || t == "no") return false;
  bad(key, v, "true or false");
}

std::vector<double> as_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  if (trim(v).empty()) return out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) out.push_back(as_double(key, item));
  return out;
}

Dims3 as_dims(const std::string& key, const std::string& v) {
  const auto l = as_list(key, v);
  if (l.size() != 3) bad(key, v, "H,W,D");
  Dims3 d;
  std::size_t* dst[3] = {&d.h, &d.w, &d.d};
  for (int i = 0; i < 3; ++i) {
    if (!(l[i] >= 1 && l[i] == std::floor(l[i]))) bad(key, v, "three positive integers");
    *dst[i] = static_cast<std::size_t>(l[i]);
  }
  return d;
}

std::string list_text(const std::vector<double>& l) {
  std::string s;
  for (std::size_t i = 0; i < l.size(); ++i) s += (i ? "," : "") + format_double(l[i]);
  return s;
}

std::string dims_text(Dims3 d) {
  return std::to_string(d.h) + "," + std::to_string(d.w) + "," + std::to_string(d.d);
}

std::string b(bool v) { return v ? "true" : "false"; }

#define SIZE_KEY(name, help, field) \
  {name, help, [](Settings& s, const std::string& v) { s.field = as_size(name, v); }, \
   [](const Settings& s) { return std::to_string(s.field); }}
#define U64_KEY(name, help, field) \
  {name, help, [](Settings& s, const std::string& v) { s.field = as_u64(name, v); }, \
   [](const Settings& s) { return std::to_string(s.field); }}
#define REAL_KEY(name, help, field) \
  {name, help, [](Settings& s, const std::string& v) { s.field = as_double(name, v); }, \
   [](const Settings& s) { return format_double(s.field); }}
#define BOOL_KEY(name, help, field) \
  {name, help, [](Settings& s, const std::string& v) { s.field = as_bool(name, v); }, \
   [](const Settings& s) { return b(s.field); }}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      SIZE_KEY("gen.num_samples", "volumes to generate", gen.num_samples),
      SIZE_KEY("gen.num_modalities", "modalities per volume (C)", gen.num_modalities),
      {"gen.dims", "volume shape H,W,D",
       [](Settings& s, const std::string& v) { s.gen.dims = as_dims("gen.dims", v); },
       [](const Settings& s) { return dims_text(s.gen.dims); }},
      REAL_KEY("gen.diversity", "per-sample perturbation scale (delta)", gen.diversity),
      {"gen.modality_offsets", "comma-separated base intensity per modality (empty = built-in ladder)",
       [](Settings& s, const std::string& v) { s.gen.modality_offsets = as_list("gen.modality_offsets", v); },
       [](const Settings& s) { return list_text(s.gen.modality_offsets); }},
      REAL_KEY("gen.lesion_fraction", "fraction of voxels inside the lesion sphere", gen.lesion_fraction),
      REAL_KEY("gen.lesion_probability", "probability that a volume carries a lesion", gen.lesion_probability),
      SIZE_KEY("gen.perturbation_cell", "edge length of the cells the perturbation is constant on",
               gen.perturbation_cell),
      U64_KEY("gen.seed", "generator seed", gen.seed),

      {"mask.kind", "random or hmp",
       [](Settings& s, const std::string& v) {
         const auto t = trim(v);
         if (t == "random") s.train.mask.kind = MaskKind::random;
         else if (t == "hmp") s.train.mask.kind = MaskKind::hmp;
         else bad("mask.kind", v, "random or hmp");
       },
       [](const Settings& s) { return std::string(to_string(s.train.mask.kind)); }},
      REAL_KEY("mask.ratio", "fraction of positions hidden by random masking", train.mask.ratio),
      U64_KEY("mask.seed", "seed for mask-preview", mask_seed),
      BOOL_KEY("hmp.modal", "enable the modal phase", train.mask.hmp.modal_enabled),
      BOOL_KEY("hmp.position", "enable the position phase", train.mask.hmp.position_enabled),
      BOOL_KEY("hmp.patch", "enable the patch phase", train.mask.hmp.patch_enabled),
      REAL_KEY("hmp.position_ratio", "fraction of positions fully masked by the position phase",
               train.mask.hmp.position_ratio),
      REAL_KEY("hmp.patch_positions_ratio", "fraction of positions visited by the patch phase",
               train.mask.hmp.patch_positions_ratio),
      SIZE_KEY("hmp.patch_min_visible", "modalities left visible at each patch-phase position",
               train.mask.hmp.patch_min_visible),

      {"model.patch", "patch size ph,pw,pd",
       [](Settings& s, const std::string& v) {
         const Dims3 d = as_dims("model.patch", v);
         s.train.model.patch = {d.h, d.w, d.d};
       },
       [](const Settings& s) {
         const auto& p = s.train.model.patch;
         return dims_text({p.ph, p.pw, p.pd});
       }},
      SIZE_KEY("model.depth", "encoder blocks", train.model.depth),
      SIZE_KEY("model.embed_dim", "token width d", train.model.embed_dim),
      SIZE_KEY("model.num_heads", "attention heads", train.model.num_heads),
      SIZE_KEY("model.mlp_ratio", "MLP hidden width / d", train.model.mlp_ratio),
      SIZE_KEY("model.pyramid_levels", "pyramid levels L (taps every depth/L blocks)", train.model.pyramid_levels),
      U64_KEY("model.seed", "initialization seed", train.model.seed),
      {"model.precision", "f64 or f32",
       [](Settings& s, const std::string& v) {
         const auto t = trim(v);
         if (t == "f64") s.train.model.precision = Precision::f64;
         else if (t == "f32") s.train.model.precision = Precision::f32;
         else bad("model.precision", v, "f64 or f32");
       },
       [](const Settings& s) { return std::string(s.train.model.precision == Precision::f64 ? "f64" : "f32"); }},

      SIZE_KEY("train.steps", "optimizer steps", train.steps),
      SIZE_KEY("train.batch_size", "volumes per step", train.batch_size),
      REAL_KEY("train.lr", "peak learning rate", train.adam.learning_rate),
      REAL_KEY("train.weight_decay", "decoupled weight decay on weight matrices", train.adam.weight_decay),
      REAL_KEY("train.beta1", "Adam first-moment decay", train.adam.beta1),
      REAL_KEY("train.beta2", "Adam second-moment decay", train.adam.beta2),
      REAL_KEY("train.eps", "Adam epsilon", train.adam.eps),
      REAL_KEY("train.warmup_fraction", "fraction of steps with linear warmup", train.warmup_fraction),
      SIZE_KEY("train.eval_every", "steps between collapse reports (0 = start and end only)", train.eval_every),
      SIZE_KEY("train.top_k", "singular values per eval row", train.top_k),
      BOOL_KEY("train.pbt", "add the multi-level cross-correlation term", train.pbt_enabled),
      REAL_KEY("train.pbt_lambda", "off-diagonal weight of the PBT term", train.pbt_lambda),
      BOOL_KEY("train.full_volume_loss", "reconstruction loss over every voxel instead of masked ones",
               train.full_volume_loss),
      U64_KEY("train.seed", "batch and mask sampling seed", train.seed),

      SIZE_KEY("diag.probe_size", "volumes per collapse report", train.diag.probe_size),
      SIZE_KEY("diag.var_draws", "Monte Carlo draws per collapse report", train.diag.var_draws),
      SIZE_KEY("diag.feature_level", "pyramid level for the spectrum (0 = final)", train.diag.feature_level),
      {"diag.feature_source", "full or masked branch features for the spectrum",
       [](Settings& s, const std::string& v) {
         const auto t = trim(v);
         if (t == "full") s.train.diag.feature_source = FeatureSourceChoice::full_input;
         else if (t == "masked") s.train.diag.feature_source = FeatureSourceChoice::masked_input;
         else bad("diag.feature_source", v, "full or masked");
       },
       [](const Settings& s) {
         return std::string(s.train.diag.feature_source == FeatureSourceChoice::full_input ? "full" : "masked");
       }},
      REAL_KEY("diag.threshold", "convergence threshold for Var(x_m)", train.diag.threshold),

      REAL_KEY("probe.train_fraction", "share of each class used to fit the probe", probe.train_fraction),
      SIZE_KEY("probe.iterations", "gradient steps for the logistic probe", probe.iterations),
      REAL_KEY("probe.lr", "probe learning rate", probe.learning_rate),
      REAL_KEY("probe.l2", "probe L2 penalty", probe.l2),
      U64_KEY("probe.seed", "probe split seed", probe.seed),

      SIZE_KEY("var.draws", "Monte Carlo draws per estimate-var row", var.draws),
      {"var.ratios", "comma-separated mask ratios swept by estimate-var",
       [](Settings& s, const std::string& v) { s.var.ratios = as_list("var.ratios", v); },
       [](const Settings& s) { return list_text(s.var.ratios); }},
      U64_KEY("var.seed", "estimate-var seed", var.seed),
  };
  return table;
}

#undef SIZE_KEY
#undef U64_KEY
#undef REAL_KEY
#undef BOOL_KEY

}  // namespace

const std::vector<KeyInfo>& config_keys() {
  static const std::vector<KeyInfo> keys = [] {
    std::vector<KeyInfo> k;
    for (const auto& e : entries()) k.push_back({e.key, e.help});
    return k;
  }();
  return keys;
}

KeyValues parse_key_values(std::istream& in, const std::string& source) {
  KeyValues kv;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const auto t = trim(std::string_view(line).substr(0, hash));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("", source + ":" + std::to_string(number) + ": expected key=value");
    }
    kv.emplace_back(std::string(trim(t.substr(0, eq))), std::string(trim(t.substr(eq + 1))));
  }
  return kv;
}

void apply_setting(Settings& settings, const std::string& key, const std::string& value) {
  for (const auto& e : entries()) {
    if (e.key == key) {
      e.set(settings, value);
      return;
    }
  }
  throw ConfigError(key, "unknown config key: " + key);
}

Settings load_settings(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  Settings s;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("", "cannot read config file " + file->string());
    for (const auto& [k, v] : parse_key_values(in, file->string())) apply_setting(s, k, v);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError(o, "override must be key=value: " + o);
    apply_setting(s, std::string(trim(std::string_view(o).substr(0, eq))),
                  std::string(trim(std::string_view(o).substr(eq + 1))));
  }
  validate(s);
  return s;
}

void validate(const Settings& s) {
  const auto wrap = [](const std::string& section, auto&& f) {
    try {
      f();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(section, e.what());
    }
  };
  wrap("gen", [&] { validate(s.gen); });
  wrap("hmp", [&] { validate(s.train.mask.hmp, s.gen.num_modalities); });
  if (!(s.train.mask.ratio >= 0.0 && s.train.mask.ratio <= 1.0)) {
    throw ConfigError("mask.ratio", "mask.ratio must lie in [0, 1]");
  }
  for (double r : s.var.ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("var.ratios", "var.ratios entries must lie in [0, 1]");
  }
  if (s.var.draws == 0) throw ConfigError("var.draws", "var.draws must be >= 1");
  if (!(s.probe.train_fraction > 0.0 && s.probe.train_fraction < 1.0)) {
    throw ConfigError("probe.train_fraction", "probe.train_fraction must lie in (0, 1)");
  }
  wrap("model", [&] {
    TrainConfig t = s.train;
    t.model.num_modalities = s.gen.num_modalities;
    t.model.dims = s.gen.dims;
    validate(t);
  });
}

KeyValues to_key_values(const Settings& s) {
  KeyValues kv;
  for (const auto& e : entries()) kv.emplace_back(e.key, e.get(s));
  return kv;
}

}  // namespace emim
