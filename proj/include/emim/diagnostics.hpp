#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "emim/masking.hpp"
#include "emim/nn.hpp"
#include "emim/rng.hpp"
#include "emim/volume.hpp"

namespace emim {

class DiagnosticError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Loss level below which a run counts as converged.
inline constexpr double kDefaultConvergenceThreshold = 0.01;

struct VarianceEstimate {
  double mean_var = 0.0;   // per masked voxel
  double std_error = 0.0;  // of the per-draw means
  std::size_t num_draws = 0;
  std::size_t skipped_draws = 0;  // draws with nothing masked
  MaskKind mask_kind = MaskKind::random;
};

/// Per-coordinate mean over the dataset, (c, x, y, z) order.
std::vector<double> mean_field(std::span<const MultiModalVolume> dataset);

/// Monte Carlo estimate of the masked-voxel variance about the dataset mean
/// field. Draws are split into fixed chunks with their own streams, so the
/// result does not depend on `workers`.
VarianceEstimate estimate_masked_variance(std::span<const MultiModalVolume> dataset, PatchSize patch,
                                          const MaskStrategy& strategy, std::size_t num_draws, Rng& rng,
                                          std::size_t workers = 1);

struct TrivialScore {
  double score = 0.0;    // in [0, 1]
  double pearson = 0.0;  // average output vs mean target
  double output_variance = 0.0;
  double input_variance = 0.0;
};

/// 1 - (mean pairwise output variance / mean pairwise input variance), clamped.
/// outputs[k] and inputs[k] are aligned flat vectors for probe k.
TrivialScore trivial_solution_score(const std::vector<std::vector<double>>& outputs,
                                    const std::vector<std::vector<double>>& inputs,
                                    std::span<const double> mean_target);

/// Singular values of the row-centered matrix, descending.
std::vector<double> singular_spectrum(const Eigen::MatrixXd& features);
std::vector<double> singular_spectrum(const LatentFeatures& features);

double effective_rank(std::span<const double> sigma);

/// One sampled masked view: a volume identifier plus its split.
struct MaskedViewSample {
  std::size_t volume_id = 0;
  MaskedViews views;
};

struct MaskGraph {
  /// Distinct views in first-seen order; node k is samples[nodes[k]].
  std::vector<std::size_t> nodes;
  std::vector<double> frequency;  // empirical frequency of each node
  // omega[i][j] = frequency(i) * frequency(j) when the views share a visible
  // block and a hidden block, else 0.
  std::vector<std::vector<double>> omega;
};

/// True when the views share a visible and a hidden block (same position,
/// modality and content).
bool views_share_patches(const MaskedViews& a, const MaskedViews& b);

MaskGraph build_mask_graph(const std::vector<MaskedViewSample>& samples);

enum class FeatureSourceChoice { full_input, masked_input };

struct CollapseConfig {
  std::size_t probe_size = 16;
  std::size_t var_draws = 2000;
  /// Pyramid level whose features feed the spectrum; 0 means the final level.
  std::size_t feature_level = 0;
  FeatureSourceChoice feature_source = FeatureSourceChoice::full_input;
  double threshold = kDefaultConvergenceThreshold;
  std::size_t workers = 1;
};

struct ProbeRow {
  std::size_t probe = 0;
  std::size_t volume = 0;
  double masked_mse = 0.0;
  double effective_rank = 0.0;
  double top_sigma = 0.0;
};

struct CollapseReport {
  VarianceEstimate variance;
  TrivialScore trivial;
  /// Mean spectrum over the probes.
  std::vector<double> singular_values;
  double effective_rank = 0.0;
  std::vector<double> mean_target;
  std::vector<ProbeRow> probes;
  double threshold = kDefaultConvergenceThreshold;
  double mean_masked_mse = 0.0;
};

/// Runs probe_size forward passes over the first volumes of `dataset` under
/// one shared mask and assembles every instrument.
CollapseReport collapse_report(const ModelParams& params, const EncoderConfig& model,
                               std::span<const MultiModalVolume> dataset, const MaskStrategy& strategy,
                               const CollapseConfig& config, Rng& rng);

/// Header "probe,volume,masked_mse,effective_rank,top_sigma", one row per
/// probe, then a "summary" row.
void write_report_csv(std::ostream& out, const CollapseReport& report);
void write_report_summary(std::ostream& out, const CollapseReport& report);
/// "index,sigma" lines.
void write_spectrum_csv(std::ostream& out, std::span<const double> sigma);

}  // namespace emim
