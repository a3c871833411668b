#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "emim/config.hpp"
#include "emim/diagnostics.hpp"
#include "emim/masking.hpp"
#include "emim/nn.hpp"
#include "emim/parallel.hpp"
#include "emim/train.hpp"
#include "emim/volume.hpp"

namespace fs = std::filesystem;
using namespace emim;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, missing_input = 3, numerical_abort = 4 };

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string probe_data;
};

std::string keys_help() {
  std::ostringstream s;
  s << "Config keys (--set key=value or one per line in --config):\n";
  for (const auto& k : config_keys()) s << "  " << k.key << "  " << k.help << "\n";
  return s.str();
}

Settings settings_of(const Common& c) {
  std::optional<fs::path> file;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw MissingInput("config file not found: " + c.config);
    file = c.config;
  }
  Settings s = load_settings(file, c.sets);
  s.train.workers = worker_count();
  s.train.diag.workers = s.train.workers;
  return s;
}

DatasetOnDisk dataset_at(const std::string& dir) {
  if (dir.empty()) throw MissingInput("--data is required");
  return load_dataset(dir);
}

Checkpoint checkpoint_at(const std::string& path) {
  if (path.empty()) throw MissingInput("--checkpoint is required");
  if (!fs::exists(path)) throw MissingInput("checkpoint not found: " + path);
  return load_checkpoint(path);
}

/// The model shape follows the data it runs on.
void adopt_shape(Settings& s, const std::vector<MultiModalVolume>& volumes) {
  if (volumes.empty()) throw MissingInput("dataset is empty");
  s.train.model.num_modalities = volumes.front().num_modalities();
  s.train.model.dims = volumes.front().dims();
  s.gen.num_modalities = s.train.model.num_modalities;
  s.gen.dims = s.train.model.dims;
  validate(s);
}

fs::path out_dir(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out", "--out is required");
  fs::create_directories(c.out);
  return c.out;
}

template <typename F>
void write_file(const fs::path& path, F&& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  body(f);
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

void write_settings(const fs::path& path, const Settings& s) {
  write_file(path, [&](std::ostream& o) {
    for (const auto& [k, v] : to_key_values(s)) o << k << "=" << v << "\n";
  });
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

int cmd_gen_data(const Common& c) {
  Settings s = settings_of(c);
  const fs::path out = out_dir(c);
  const LabeledDataset data = generate_labeled_dataset(s.gen);
  save_dataset(out, data, to_key_values(s.gen));
  std::cerr << "wrote " << data.volumes.size() << " volumes to " << out.string() << "\n";
  return ok;
}

int cmd_estimate_var(const Common& c) {
  Settings s = settings_of(c);
  const DatasetOnDisk ds = dataset_at(c.data);
  adopt_shape(s, ds.volumes);
  const fs::path out = out_dir(c);
  const PatchSize patch = s.train.model.patch;

  std::ostringstream csv;
  csv << "# threshold=" << fmt(s.train.diag.threshold) << "\n";
  csv << "strategy,rho,mean_var,std_error,num_draws\n";
  for (MaskKind kind : {MaskKind::random, MaskKind::hmp}) {
    for (double rho : s.var.ratios) {
      MaskStrategy strategy = s.train.mask;
      strategy.kind = kind;
      if (kind == MaskKind::random) strategy.ratio = rho;
      else strategy.hmp.position_ratio = rho;
      Rng rng(s.var.seed);
      const VarianceEstimate est =
          estimate_masked_variance(ds.volumes, patch, strategy, s.var.draws, rng, s.train.workers);
      csv << to_string(kind) << "," << fmt(rho) << "," << fmt(est.mean_var) << "," << fmt(est.std_error)
          << "," << est.num_draws << "\n";
    }
  }
  write_file(out / "variance.csv", [&](std::ostream& o) { o << csv.str(); });
  std::cout << csv.str();
  return ok;
}

int cmd_mask_preview(const Common& c) {
  Settings s = settings_of(c);
  if (!c.data.empty()) adopt_shape(s, dataset_at(c.data).volumes);
  const fs::path out = out_dir(c);
  const std::size_t n = s.train.model.num_positions();
  const std::size_t C = s.train.model.num_modalities;
  Rng rng(s.mask_seed);
  const BinaryMask mask = s.train.mask.draw(n, C, rng);
  write_file(out / "mask.txt", [&](std::ostream& o) { write_mask_text(o, mask, s.mask_seed); });
  write_mask_text(std::cout, mask, s.mask_seed);
  return ok;
}

int cmd_pretrain(const Common& c) {
  Settings s = settings_of(c);
  const DatasetOnDisk ds = dataset_at(c.data);
  adopt_shape(s, ds.volumes);
  const fs::path out = out_dir(c);
  const std::size_t every = std::max<std::size_t>(1, s.train.eval_every);
  const PretrainResult r = pretrain(s.train, ds.volumes, [&](const TrainRow& row) {
    if (row.step % every == 0 || row.step == s.train.steps) {
      std::cerr << "step " << row.step << " l_mim=" << fmt(row.l_mim) << " l_pbt=" << fmt(row.l_pbt_total)
                << "\n";
    }
  });
  save_checkpoint(out / "checkpoint.emim", s.train.model, r.params);
  write_file(out / "train_log.csv", [&](std::ostream& o) { write_train_log(o, r.log); });
  write_file(out / "eval_log.csv", [&](std::ostream& o) { write_eval_log(o, r.log, s.train.top_k); });
  write_file(out / "report.csv", [&](std::ostream& o) { write_report_csv(o, r.final_report); });
  write_file(out / "report_summary.txt", [&](std::ostream& o) { write_report_summary(o, r.final_report); });
  write_file(out / "spectrum.csv", [&](std::ostream& o) { write_spectrum_csv(o, r.final_report.singular_values); });
  write_settings(out / "settings.txt", s);
  std::cout << "final_l_mim=" << fmt(final_mim(r.log)) << "\n";
  write_report_summary(std::cout, r.final_report);
  return ok;
}

int cmd_diagnose(const Common& c) {
  Settings s = settings_of(c);
  const DatasetOnDisk ds = dataset_at(c.data);
  const Checkpoint ck = checkpoint_at(c.checkpoint);
  adopt_shape(s, ds.volumes);
  if (ck.config.num_modalities != s.train.model.num_modalities || !(ck.config.dims == s.train.model.dims)) {
    throw ConfigError("--data", "dataset shape does not match the checkpoint");
  }
  const fs::path out = out_dir(c);
  Rng rng = Rng::stream(s.train.seed, 0xd1a9);
  const CollapseReport report = collapse_report(ck.params, ck.config, ds.volumes, s.train.mask, s.train.diag, rng);
  write_file(out / "report.csv", [&](std::ostream& o) { write_report_csv(o, report); });
  write_file(out / "report_summary.txt", [&](std::ostream& o) { write_report_summary(o, report); });
  write_file(out / "spectrum.csv", [&](std::ostream& o) { write_spectrum_csv(o, report.singular_values); });
  write_report_summary(std::cout, report);
  return ok;
}

int cmd_probe(const Common& c) {
  Settings s = settings_of(c);
  const DatasetOnDisk ds = dataset_at(c.data);
  const Checkpoint ck = checkpoint_at(c.checkpoint);
  adopt_shape(s, ds.volumes);
  const fs::path out = out_dir(c);
  if (ck.config.num_modalities != s.train.model.num_modalities || !(ck.config.dims == s.train.model.dims)) {
    throw ConfigError("--data", "dataset shape does not match the checkpoint");
  }
  const LabeledDataset data{ds.volumes, ds.labels};
  const ProbeResult r = linear_probe(ck.params, ck.config, data, s.probe);
  std::ostringstream line;
  line << "probe_accuracy=" << fmt(r.test_accuracy) << " train_accuracy=" << fmt(r.train_accuracy)
       << " num_train=" << r.num_train << " num_test=" << r.num_test << "\n";
  write_file(out / "probe.txt", [&](std::ostream& o) { o << line.str(); });
  std::cout << line.str();
  return ok;
}

bool two_classes(const std::vector<int>& labels) {
  bool pos = false, neg = false;
  for (int l : labels) (l ? pos : neg) = true;
  return pos && neg;
}

int cmd_ablate(const Common& c) {
  Settings s = settings_of(c);
  const DatasetOnDisk ds = dataset_at(c.data);
  adopt_shape(s, ds.volumes);
  LabeledDataset probe_data;
  if (!c.probe_data.empty()) {
    const DatasetOnDisk pd = dataset_at(c.probe_data);
    probe_data = {pd.volumes, pd.labels};
  } else {
    probe_data = {ds.volumes, ds.labels};
  }
  if (!two_classes(probe_data.labels)) {
    std::cerr << "note: probe data has a single class; probe_accuracy will be nan\n";
    probe_data = {};
  }
  const fs::path out = out_dir(c);
  const auto rows = ablate(default_ablation_grid(s.train), ds.volumes, probe_data, s.probe);
  write_file(out / "ablation.csv", [&](std::ostream& o) { write_ablation_csv(o, rows); });
  write_ablation_csv(std::cout, rows);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-image-modeling collapse diagnostics and pretraining"};
  app.require_subcommand(1);
  app.footer(keys_help());

  Common c;
  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const Common&);
    bool data, checkpoint, probe_data;
  };
  const std::vector<Sub> subs = {
      {"gen-data", "generate a synthetic dataset directory into --out", cmd_gen_data, false, false, false},
      {"estimate-var", "sweep masked-target variance over ratios and strategies", cmd_estimate_var, true, false,
       false},
      {"mask-preview", "draw one mask and write it as text", cmd_mask_preview, true, false, false},
      {"pretrain", "train an encoder and write logs, report and checkpoint", cmd_pretrain, true, false, false},
      {"diagnose", "collapse report for a checkpoint on a dataset", cmd_diagnose, true, true, false},
      {"probe", "linear lesion probe on frozen features", cmd_probe, true, true, false},
      {"ablate", "train the {random, hmp} x {pbt off, on} grid", cmd_ablate, true, false, true},
  };
  std::vector<std::pair<CLI::App*, const Sub*>> apps;
  for (const auto& sub : subs) {
    CLI::App* a = app.add_subcommand(sub.name, sub.help);
    a->footer(keys_help());
    a->add_option("--config", c.config, "key=value config file");
    a->add_option("--set", c.sets, "override one key (repeatable)")->take_all();
    a->add_option("--out", c.out, "output directory")->required();
    if (sub.data) a->add_option("--data", c.data, "dataset directory");
    if (sub.checkpoint) a->add_option("--checkpoint", c.checkpoint, "checkpoint file");
    if (sub.probe_data) a->add_option("--probe-data", c.probe_data, "labeled dataset for the probe");
    apps.emplace_back(a, &sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? ok : config_error;
  }

  try {
    for (const auto& [a, sub] : apps) {
      if (a->parsed()) return sub->run(c);
    }
    return failure;
  } catch (const ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << "\n";
    return config_error;
  } catch (const MissingInput& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return missing_input;
  } catch (const VolumeFormatError& e) {
    std::cerr << (e.code() == FormatErrc::io_error ? "missing input: " : "bad input: ") << e.what() << "\n";
    return e.code() == FormatErrc::io_error ? missing_input : failure;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return numerical_abort;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
}
