#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "emim/diagnostics.hpp"
#include "emim/masking.hpp"
#include "emim/nn.hpp"
#include "emim/volume.hpp"

namespace emim {

struct AdamHyper {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct AdamState {
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update with decoupled weight decay, applied to
/// tensors whose `decay` flag is set. `lr` overrides hyper.learning_rate.
void adam_step(const std::vector<Eigen::MatrixXd*>& params, const std::vector<const Eigen::MatrixXd*>& grads,
               const std::vector<bool>& decay, AdamState& state, const AdamHyper& hyper, double lr);

/// Weight matrices decay; biases, norms, positional embeddings and the mask
/// token do not.
bool decays(const std::string& tensor_name);

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamHyper& hyper,
               double lr);

/// Linear warmup over the first warmup_fraction of steps, then cosine decay to 0.
double learning_rate_at(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction);

struct TrainConfig {
  EncoderConfig model{};
  MaskStrategy mask{};
  bool pbt_enabled = false;
  double pbt_lambda = 1.0;
  bool full_volume_loss = false;
  AdamHyper adam{};
  double warmup_fraction = 0.1;
  std::size_t batch_size = 8;
  std::size_t steps = 2000;
  std::size_t eval_every = 100;
  std::size_t top_k = 5;
  CollapseConfig diag{};
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

void validate(const TrainConfig& config);

struct TrainRow {
  std::size_t step = 0;
  double l_mim = 0.0;
  double l_pbt_total = 0.0;
  double l_overall = 0.0;
};

struct EvalRow {
  std::size_t step = 0;
  double var_estimate = 0.0;
  double trivial_score = 0.0;
  double effective_rank = 0.0;
  double masked_mse = 0.0;
  std::vector<double> top_sigma;
};

struct RunLog {
  std::vector<TrainRow> train;
  std::vector<EvalRow> eval;
};

void write_train_log(std::ostream& out, const RunLog& log);
void write_eval_log(std::ostream& out, const RunLog& log, std::size_t top_k);

class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(std::size_t step, const std::string& what)
      : NumericalError("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct PretrainResult {
  ModelParams params;
  RunLog log;
  CollapseReport final_report;
};

/// Optional per-step callback (step, row); used for progress output.
using StepCallback = std::function<void(const TrainRow&)>;

/// Trains from config.model.seed's initialization. Steps are numbered from 1;
/// eval rows are written at step 0, every eval_every steps and at the end.
PretrainResult pretrain(const TrainConfig& config, std::span<const MultiModalVolume> dataset,
                        const StepCallback& on_step = {});

/// Mean l_mim over the last `window` train rows.
double final_mim(const RunLog& log, std::size_t window = 100);

/// Held-out masked-voxel MSE of a model on `volumes` under masks drawn from
/// `strategy` with its own seeded stream.
double masked_reconstruction_error(const ModelParams& params, const EncoderConfig& model,
                                   std::span<const MultiModalVolume> volumes, const MaskStrategy& strategy,
                                   std::size_t masks_per_volume, std::uint64_t seed);

struct ProbeConfig {
  double train_fraction = 0.5;
  std::size_t iterations = 2000;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t num_train = 0;
  std::size_t num_test = 0;
};

/// Logistic regression on standardized rows of `features` (N x k) with a
/// stratified train/test split.
ProbeResult logistic_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                           const ProbeConfig& config);

/// Mean-pooled final-level features of the clean volumes, one row per volume.
Eigen::MatrixXd pooled_features(const ModelParams& params, const EncoderConfig& model,
                                std::span<const MultiModalVolume> volumes);

ProbeResult linear_probe(const ModelParams& params, const EncoderConfig& model, const LabeledDataset& data,
                         const ProbeConfig& config);

struct AblationEntry {
  std::string name;
  TrainConfig config;
};

struct AblationRow {
  std::string name;
  std::string mask;
  bool pbt = false;
  double l_mim = 0.0;
  double var_estimate = 0.0;
  double trivial_score = 0.0;
  double effective_rank = 0.0;
  double probe_accuracy = 0.0;
};

/// Runs each entry and collects final metrics; probe accuracy uses `probe_data`
/// and is NaN when it is empty.
std::vector<AblationRow> ablate(const std::vector<AblationEntry>& entries,
                                std::span<const MultiModalVolume> dataset, const LabeledDataset& probe_data,
                                const ProbeConfig& probe);

/// {random, hmp} x {pbt off, on} around a base config.
std::vector<AblationEntry> default_ablation_grid(const TrainConfig& base);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace emim
