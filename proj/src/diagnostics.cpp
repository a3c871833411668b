#include "emim/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "emim/parallel.hpp"
#include "emim/text.hpp"

namespace emim {

namespace {

constexpr std::size_t kDrawsPerChunk = 4096;

void check_same_shape(std::span<const MultiModalVolume> dataset) {
  if (dataset.empty()) throw DiagnosticError("dataset is empty");
  for (const auto& v : dataset) {
    if (v.num_modalities() != dataset[0].num_modalities() || !(v.dims() == dataset[0].dims())) {
      throw DiagnosticError("dataset volumes differ in shape");
    }
  }
}

std::size_t position_of(Dims3 grid, PatchSize patch, std::size_t x, std::size_t y, std::size_t z) {
  return ((x / patch.ph) * grid.w + (y / patch.pw)) * grid.d + (z / patch.pd);
}

}  // namespace

std::vector<double> mean_field(std::span<const MultiModalVolume> dataset) {
  check_same_shape(dataset);
  std::vector<double> mu(dataset[0].size(), 0.0);
  for (const auto& v : dataset) {
    const auto data = v.data();
    for (std::size_t k = 0; k < mu.size(); ++k) mu[k] += data[k];
  }
  for (double& m : mu) m /= static_cast<double>(dataset.size());
  return mu;
}

VarianceEstimate estimate_masked_variance(std::span<const MultiModalVolume> dataset, PatchSize patch,
                                          const MaskStrategy& strategy, std::size_t num_draws, Rng& rng,
                                          std::size_t workers) {
  if (num_draws == 0) throw DiagnosticError("num_draws must be >= 1");
  const auto mu = mean_field(dataset);
  const std::size_t channels = dataset[0].num_modalities();
  const Dims3 dims = dataset[0].dims();
  const std::size_t n = num_positions(dims, patch);
  const Dims3 grid{dims.h / patch.ph, dims.w / patch.pw, dims.d / patch.pd};

  // Squared deviation summed over each (volume, modality, position) block.
  std::vector<std::vector<double>> block_sq(dataset.size(), std::vector<double>(channels * n, 0.0));
  for (std::size_t v = 0; v < dataset.size(); ++v) {
    const auto& vol = dataset[v];
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t x = 0; x < dims.h; ++x)
        for (std::size_t y = 0; y < dims.w; ++y)
          for (std::size_t z = 0; z < dims.d; ++z) {
            const std::size_t k = vol.index(c, x, y, z);
            const double dev = vol.data()[k] - mu[k];
            block_sq[v][c * n + position_of(grid, patch, x, y, z)] += dev * dev;
          }
  }

  struct Partial {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t used = 0;
    std::size_t skipped = 0;
  };
  const std::size_t chunks = (num_draws + kDrawsPerChunk - 1) / kDrawsPerChunk;
  std::vector<Partial> partial(chunks);
  const std::uint64_t master = rng.next_u64();
  const double voxels = static_cast<double>(patch.voxels());
  parallel_for(chunks, workers, [&](std::size_t chunk) {
    Rng stream = Rng::stream(master, chunk);
    Partial& p = partial[chunk];
    const std::size_t begin = chunk * kDrawsPerChunk;
    const std::size_t end = std::min(num_draws, begin + kDrawsPerChunk);
    for (std::size_t draw = begin; draw < end; ++draw) {
      const auto v = static_cast<std::size_t>(stream.below(dataset.size()));
      const BinaryMask mask = strategy.draw(n, channels, stream);
      if (mask.count() == 0) {
        ++p.skipped;
        continue;
      }
      double s = 0.0;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < n; ++i)
          if (mask.masked(c, i)) s += block_sq[v][c * n + i];
      const double m = s / (static_cast<double>(mask.count()) * voxels);
      p.sum += m;
      p.sum_sq += m * m;
      ++p.used;
    }
  });

  Partial total;
  for (const auto& p : partial) {
    total.sum += p.sum;
    total.sum_sq += p.sum_sq;
    total.used += p.used;
    total.skipped += p.skipped;
  }
  VarianceEstimate e;
  e.num_draws = num_draws;
  e.skipped_draws = total.skipped;
  e.mask_kind = strategy.kind;
  if (total.used == 0) return e;
  const double k = static_cast<double>(total.used);
  e.mean_var = total.sum / k;
  if (total.used > 1) {
    const double var = std::max(0.0, (total.sum_sq - k * e.mean_var * e.mean_var) / (k - 1.0));
    e.std_error = std::sqrt(var / k);
  }
  return e;
}

TrivialScore trivial_solution_score(const std::vector<std::vector<double>>& outputs,
                                    const std::vector<std::vector<double>>& inputs,
                                    std::span<const double> mean_target) {
  if (outputs.size() < 2 || outputs.size() != inputs.size()) {
    throw DiagnosticError("trivial score needs at least two aligned probes");
  }
  const std::size_t dim = inputs[0].size();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (inputs[k].size() != dim || outputs[k].size() != dim) throw DiagnosticError("probe vectors differ in length");
  }
  if (mean_target.size() != dim) throw DiagnosticError("mean target length does not match probes");
  // Mean pairwise variance equals the unbiased per-coordinate variance.
  const auto pairwise = [&](const std::vector<std::vector<double>>& rows) {
    double total = 0.0;
    const double m = static_cast<double>(rows.size());
    for (std::size_t j = 0; j < dim; ++j) {
      double mean = 0.0;
      for (const auto& r : rows) mean += r[j];
      mean /= m;
      double ss = 0.0;
      for (const auto& r : rows) ss += (r[j] - mean) * (r[j] - mean);
      total += ss / (m - 1.0);
    }
    return dim == 0 ? 0.0 : total / static_cast<double>(dim);
  };
  TrivialScore t;
  t.input_variance = pairwise(inputs);
  t.output_variance = pairwise(outputs);
  if (!(t.input_variance > 0.0)) throw DiagnosticError("degenerate probe set: zero input variance");
  t.score = std::clamp(1.0 - t.output_variance / t.input_variance, 0.0, 1.0);

  std::vector<double> avg(dim, 0.0);
  for (const auto& r : outputs)
    for (std::size_t j = 0; j < dim; ++j) avg[j] += r[j] / static_cast<double>(outputs.size());
  double ma = 0.0, mt = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    ma += avg[j];
    mt += mean_target[j];
  }
  ma /= static_cast<double>(dim);
  mt /= static_cast<double>(dim);
  double sab = 0.0, saa = 0.0, stt = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    sab += (avg[j] - ma) * (mean_target[j] - mt);
    saa += (avg[j] - ma) * (avg[j] - ma);
    stt += (mean_target[j] - mt) * (mean_target[j] - mt);
  }
  t.pearson = (saa > 0.0 && stt > 0.0) ? sab / std::sqrt(saa * stt) : 0.0;
  return t;
}

std::vector<double> singular_spectrum(const Eigen::MatrixXd& features) {
  if (features.rows() < 1 || features.cols() < 1) throw DiagnosticError("feature matrix is empty");
  if (!features.allFinite()) throw DiagnosticError("feature matrix has non-finite entries");
  const Eigen::MatrixXd centered = features.rowwise() - features.colwise().mean();
  const Eigen::BDCSVD<Eigen::MatrixXd> svd(centered);
  const auto& s = svd.singularValues();
  std::vector<double> sigma(s.data(), s.data() + s.size());
  std::sort(sigma.begin(), sigma.end(), std::greater<>());
  for (double& v : sigma) v = std::max(v, 0.0);
  return sigma;
}

std::vector<double> singular_spectrum(const LatentFeatures& features) { return singular_spectrum(features.matrix); }

double effective_rank(std::span<const double> sigma) {
  double total = 0.0;
  for (double s : sigma) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw DiagnosticError("singular values must be finite and nonnegative");
    total += s;
  }
  if (!(total > 0.0)) throw DiagnosticError("effective rank of an all-zero spectrum");
  double entropy = 0.0;
  for (double s : sigma) {
    const double p = s / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

namespace {

bool share_any(const std::vector<MaskedPatch>& a, const std::vector<MaskedPatch>& b) {
  std::map<std::pair<std::size_t, std::size_t>, const std::vector<float>*> index;
  for (const auto& p : a) index[{p.position, p.modality}] = &p.voxels;
  for (const auto& q : b) {
    const auto it = index.find({q.position, q.modality});
    if (it != index.end() && *it->second == q.voxels) return true;
  }
  return false;
}

}  // namespace

bool views_share_patches(const MaskedViews& a, const MaskedViews& b) {
  return share_any(a.unmasked, b.unmasked) && share_any(a.masked, b.masked);
}

MaskGraph build_mask_graph(const std::vector<MaskedViewSample>& samples) {
  MaskGraph g;
  std::vector<std::size_t> counts;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& v = samples[s].views;
    std::size_t node = g.nodes.size();
    for (std::size_t k = 0; k < g.nodes.size(); ++k) {
      const auto& u = samples[g.nodes[k]].views;
      if (u.masked == v.masked && u.unmasked == v.unmasked) {
        node = k;
        break;
      }
    }
    if (node == g.nodes.size()) {
      g.nodes.push_back(s);
      counts.push_back(0);
    }
    ++counts[node];
  }
  const double total = static_cast<double>(samples.size());
  for (std::size_t c : counts) g.frequency.push_back(static_cast<double>(c) / total);
  const std::size_t m = g.nodes.size();
  g.omega.assign(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) {
      if (views_share_patches(samples[g.nodes[i]].views, samples[g.nodes[j]].views)) {
        g.omega[i][j] = g.omega[j][i] = g.frequency[i] * g.frequency[j];
      }
    }
  return g;
}

CollapseReport collapse_report(const ModelParams& params, const EncoderConfig& model,
                               std::span<const MultiModalVolume> dataset, const MaskStrategy& strategy,
                               const CollapseConfig& config, Rng& rng) {
  check_same_shape(dataset);
  const std::size_t probes = std::min(config.probe_size, dataset.size());
  if (probes < 2) throw DiagnosticError("collapse report needs at least two probe volumes");
  CollapseReport r;
  r.threshold = config.threshold;
  r.variance = estimate_masked_variance(dataset, model.patch, strategy, config.var_draws, rng, config.workers);
  r.mean_target = mean_field(dataset);

  const std::size_t n = model.num_positions();
  const BinaryMask mask = strategy.draw(n, model.num_modalities, rng);
  const Dims3 dims = model.dims;
  const Dims3 grid{dims.h / model.patch.ph, dims.w / model.patch.pw, dims.d / model.patch.pd};
  std::vector<std::size_t> coords;
  for (std::size_t c = 0; c < model.num_modalities; ++c)
    for (std::size_t x = 0; x < dims.h; ++x)
      for (std::size_t y = 0; y < dims.w; ++y)
        for (std::size_t z = 0; z < dims.d; ++z)
          if (mask.masked(c, position_of(grid, model.patch, x, y, z))) {
            coords.push_back(((c * dims.h + x) * dims.w + y) * dims.d + z);
          }

  const auto taps = model.tap_layers();
  const std::size_t level = config.feature_level == 0 ? taps.size() : config.feature_level;
  if (level > taps.size()) throw DiagnosticError("feature level exceeds the pyramid depth");

  std::vector<std::vector<double>> outputs, inputs;
  std::vector<double> target;
  for (std::size_t k : coords) target.push_back(r.mean_target[k]);
  for (std::size_t p = 0; p < probes; ++p) {
    const auto& vol = dataset[p];
    const DualResult out = dual_forward(vol, mask, params, model);
    const auto recon = out.reconstruction_volume();
    std::vector<double> o, in;
    double se = 0.0;
    for (std::size_t k : coords) {
      o.push_back(recon[k]);
      in.push_back(vol.data()[k]);
      se += (recon[k] - vol.data()[k]) * (recon[k] - vol.data()[k]);
    }
    const auto& feats = config.feature_source == FeatureSourceChoice::full_input ? out.full : out.masked;
    const auto sigma = singular_spectrum(feats[level - 1]);
    if (r.singular_values.empty()) r.singular_values.assign(sigma.size(), 0.0);
    for (std::size_t j = 0; j < sigma.size(); ++j) r.singular_values[j] += sigma[j] / static_cast<double>(probes);
    ProbeRow row;
    row.probe = p;
    row.volume = p;
    row.masked_mse = coords.empty() ? 0.0 : se / static_cast<double>(coords.size());
    row.effective_rank = effective_rank(sigma);
    row.top_sigma = sigma.front();
    r.mean_masked_mse += row.masked_mse / static_cast<double>(probes);
    r.probes.push_back(row);
    outputs.push_back(std::move(o));
    inputs.push_back(std::move(in));
  }
  r.trivial = trivial_solution_score(outputs, inputs, target);
  r.effective_rank = effective_rank(r.singular_values);
  return r;
}

void write_report_csv(std::ostream& out, const CollapseReport& report) {
  out << "probe,volume,masked_mse,effective_rank,top_sigma\n";
  for (const auto& p : report.probes) {
    out << p.probe << ',' << p.volume << ',' << format_double(p.masked_mse) << ','
        << format_double(p.effective_rank) << ',' << format_double(p.top_sigma) << '\n';
  }
  out << "summary,," << format_double(report.mean_masked_mse) << ',' << format_double(report.effective_rank)
      << ',' << format_double(report.singular_values.empty() ? 0.0 : report.singular_values.front()) << '\n';
}

void write_report_summary(std::ostream& out, const CollapseReport& report) {
  out << "var_estimate=" << format_double(report.variance.mean_var) << '\n'
      << "var_std_error=" << format_double(report.variance.std_error) << '\n'
      << "var_draws=" << report.variance.num_draws << '\n'
      << "mask_kind=" << to_string(report.variance.mask_kind) << '\n'
      << "threshold=" << format_double(report.threshold) << '\n'
      << "var_above_threshold=" << (report.variance.mean_var > report.threshold ? 1 : 0) << '\n'
      << "trivial_score=" << format_double(report.trivial.score) << '\n'
      << "pearson_mean_target=" << format_double(report.trivial.pearson) << '\n'
      << "masked_mse=" << format_double(report.mean_masked_mse) << '\n'
      << "effective_rank=" << format_double(report.effective_rank) << '\n'
      << "num_singular_values=" << report.singular_values.size() << '\n';
}

void write_spectrum_csv(std::ostream& out, std::span<const double> sigma) {
  out << "index,sigma\n";
  for (std::size_t i = 0; i < sigma.size(); ++i) out << i << ',' << format_double(sigma[i]) << '\n';
}

}  // namespace emim
