#include "emim/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

#include "emim/losses.hpp"
#include "emim/parallel.hpp"
#include "emim/text.hpp"

namespace emim {

// ---------------------------------------------------------------------------
// Optimizer

void adam_step(const std::vector<Eigen::MatrixXd*>& params, const std::vector<const Eigen::MatrixXd*>& grads,
               const std::vector<bool>& decay, AdamState& state, const AdamHyper& hyper, double lr) {
  if (params.size() != grads.size() || params.size() != decay.size()) {
    throw std::invalid_argument("adam_step: tensor lists differ in length");
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
      state.v.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match params");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Eigen::MatrixXd& p = *params[k];
    const Eigen::MatrixXd& g = *grads[k];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw std::invalid_argument("adam_step: shape mismatch");
    state.m[k] = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g;
    state.v[k] = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * g.cwiseProduct(g);
    const Eigen::ArrayXXd mhat = state.m[k].array() / c1;
    const Eigen::ArrayXXd vhat = state.v[k].array() / c2;
    Eigen::ArrayXXd update = mhat / (vhat.sqrt() + hyper.eps);
    if (decay[k]) update += hyper.weight_decay * p.array();
    p.array() -= lr * update;
  }
}

bool decays(const std::string& name) {
  static const char* const kWeights[] = {"embed.w", "out.w", "attn.wq", "attn.wk", "attn.wv",
                                         "attn.wo", "mlp.w1", "mlp.w2"};
  for (const char* w : kWeights) {
    const std::string s(w);
    if (name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) return true;
  }
  return false;
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const AdamHyper& hyper,
               double lr) {
  std::vector<Eigen::MatrixXd*> p;
  std::vector<const Eigen::MatrixXd*> g;
  std::vector<bool> decay;
  params.visit([&](const std::string& name, Eigen::MatrixXd& m) {
    p.push_back(&m);
    decay.push_back(decays(name));
  });
  grads.visit([&](const std::string&, const Eigen::MatrixXd& m) { g.push_back(&m); });
  adam_step(p, g, decay, state, hyper, lr);
}

double learning_rate_at(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
  const auto warmup = static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::size_t decay_steps = total_steps - warmup;
  if (decay_steps == 0) return base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(decay_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Pretraining

void validate(const TrainConfig& c) {
  validate(c.model);
  if (c.steps == 0) throw std::invalid_argument("train.steps must be >= 1");
  if (c.batch_size == 0) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(c.adam.learning_rate >= 0.0)) throw std::invalid_argument("train.lr must be >= 0");
  if (!(c.warmup_fraction >= 0.0 && c.warmup_fraction <= 1.0)) {
    throw std::invalid_argument("train.warmup_fraction must lie in [0, 1]");
  }
  if (c.mask.kind == MaskKind::hmp) validate(c.mask.hmp, c.model.num_modalities);
}

void write_train_log(std::ostream& out, const RunLog& log) {
  out << "step,l_mim,l_pbt_total,l_overall\n";
  for (const auto& r : log.train) {
    out << r.step << ',' << format_double(r.l_mim) << ',' << format_double(r.l_pbt_total) << ','
        << format_double(r.l_overall) << '\n';
  }
}

void write_eval_log(std::ostream& out, const RunLog& log, std::size_t top_k) {
  out << "step,var_estimate,trivial_score,effective_rank,masked_mse";
  for (std::size_t k = 1; k <= top_k; ++k) out << ",sigma_" << k;
  out << '\n';
  for (const auto& r : log.eval) {
    out << r.step << ',' << format_double(r.var_estimate) << ',' << format_double(r.trivial_score) << ','
        << format_double(r.effective_rank) << ',' << format_double(r.masked_mse);
    for (std::size_t k = 0; k < top_k; ++k) out << ',' << format_double(k < r.top_sigma.size() ? r.top_sigma[k] : 0.0);
    out << '\n';
  }
}

namespace {

constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kStepStream = 0x73746570ULL;

struct SampleResult {
  LossBreakdown loss;
  ModelParams grad;
};

template <typename S>
SampleResult run_sample(const Eigen::MatrixXd& patches, const BinaryMask& mask, const BasicParams<S>& params,
                        const TrainConfig& config) {
  const Mat<S> x = patches.cast<S>();
  DualCache<S> cache;
  const auto out = dual_forward<S>(x, mask, params, config.model, &cache, config.pbt_enabled);
  DualGrad<S> grad;
  SampleResult r;
  r.loss = overall_loss<S>(out, x, mask, config.model.patch.voxels(), config.pbt_enabled, config.pbt_lambda,
                           &grad, config.full_volume_loss);
  const auto g = backward<S>(cache, grad, params, config.model);
  if constexpr (std::is_same_v<S, double>) {
    r.grad = g;
  } else {
    r.grad = g.template cast<double>();
  }
  return r;
}

EvalRow evaluate(std::size_t step, const ModelParams& params, const TrainConfig& config,
                 std::span<const MultiModalVolume> dataset, CollapseReport* report) {
  Rng rng = Rng::stream(config.seed, kEvalStream);
  CollapseConfig diag = config.diag;
  diag.workers = config.workers;
  CollapseReport r = collapse_report(params, config.model, dataset, config.mask, diag, rng);
  EvalRow row;
  row.step = step;
  row.var_estimate = r.variance.mean_var;
  row.trivial_score = r.trivial.score;
  row.effective_rank = r.effective_rank;
  row.masked_mse = r.mean_masked_mse;
  for (std::size_t k = 0; k < config.top_k && k < r.singular_values.size(); ++k) {
    row.top_sigma.push_back(r.singular_values[k]);
  }
  if (report) *report = std::move(r);
  return row;
}

}  // namespace

PretrainResult pretrain(const TrainConfig& config, std::span<const MultiModalVolume> dataset,
                        const StepCallback& on_step) {
  validate(config);
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  for (const auto& v : dataset) {
    if (v.num_modalities() != config.model.num_modalities || !(v.dims() == config.model.dims)) {
      throw std::invalid_argument("dataset volumes do not match the model config");
    }
  }
  std::vector<Eigen::MatrixXd> patches;
  patches.reserve(dataset.size());
  for (const auto& v : dataset) patches.push_back(patch_matrix(partition(v, config.model.patch)));

  PretrainResult result;
  result.params = init_params(config.model);
  AdamState adam;
  Rng rng = Rng::stream(config.seed, kStepStream);
  const std::size_t n = config.model.num_positions();
  const std::size_t channels = config.model.num_modalities;
  const std::size_t batch = config.batch_size;

  result.log.eval.push_back(evaluate(0, result.params, config, dataset, nullptr));
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<std::size_t> picks;
    if (batch <= dataset.size()) {
      picks = rng.sample_without_replacement(dataset.size(), batch);
    } else {
      for (std::size_t b = 0; b < batch; ++b) picks.push_back(static_cast<std::size_t>(rng.below(dataset.size())));
    }
    std::vector<BinaryMask> masks;
    for (std::size_t b = 0; b < batch; ++b) masks.push_back(config.mask.draw(n, channels, rng));

    std::vector<SampleResult> samples(batch);
    try {
      if (config.model.precision == Precision::f64) {
        parallel_for(batch, config.workers, [&](std::size_t b) {
          samples[b] = run_sample<double>(patches[picks[b]], masks[b], result.params, config);
        });
      } else {
        const auto p32 = result.params.cast<float>();
        parallel_for(batch, config.workers, [&](std::size_t b) {
          samples[b] = run_sample<float>(patches[picks[b]], masks[b], p32, config);
        });
      }
    } catch (const NumericalError& e) {
      throw TrainingAborted(step, e.what());
    }

    TrainRow row;
    row.step = step;
    ModelParams grad = std::move(samples[0].grad);
    for (std::size_t b = 1; b < batch; ++b) {
      std::vector<const Eigen::MatrixXd*> src;
      samples[b].grad.visit([&](const std::string&, const Eigen::MatrixXd& m) { src.push_back(&m); });
      std::size_t k = 0;
      grad.visit([&](const std::string&, Eigen::MatrixXd& m) { m += *src[k++]; });
    }
    const double inv = 1.0 / static_cast<double>(batch);
    grad.visit([&](const std::string&, Eigen::MatrixXd& m) { m *= inv; });
    for (const auto& s : samples) {
      row.l_mim += s.loss.l_mim * inv;
      row.l_pbt_total += s.loss.l_pbt_total * inv;
    }
    row.l_overall = row.l_mim + row.l_pbt_total;
    if (!std::isfinite(row.l_overall)) throw TrainingAborted(step, "non-finite loss");
    bool finite = true;
    grad.visit([&](const std::string&, const Eigen::MatrixXd& m) { finite = finite && m.allFinite(); });
    if (!finite) throw TrainingAborted(step, "non-finite gradient");

    const double lr = learning_rate_at(step - 1, config.steps, config.adam.learning_rate, config.warmup_fraction);
    adam_step(result.params, grad, adam, config.adam, lr);
    result.log.train.push_back(row);
    if (on_step) on_step(row);

    const bool last = step == config.steps;
    if (last || (config.eval_every > 0 && step % config.eval_every == 0)) {
      result.log.eval.push_back(evaluate(step, result.params, config, dataset, last ? &result.final_report : nullptr));
    }
  }
  return result;
}

double final_mim(const RunLog& log, std::size_t window) {
  if (log.train.empty()) return 0.0;
  const std::size_t k = std::max<std::size_t>(1, std::min(window, log.train.size()));
  double s = 0.0;
  for (std::size_t i = log.train.size() - k; i < log.train.size(); ++i) s += log.train[i].l_mim;
  return s / static_cast<double>(k);
}

double masked_reconstruction_error(const ModelParams& params, const EncoderConfig& model,
                                   std::span<const MultiModalVolume> volumes, const MaskStrategy& strategy,
                                   std::size_t masks_per_volume, std::uint64_t seed) {
  if (volumes.empty() || masks_per_volume == 0) throw std::invalid_argument("no held-out volumes or masks");
  Rng rng(mix_seed(seed));
  double total = 0.0;
  for (const auto& v : volumes) {
    const Eigen::MatrixXd x = patch_matrix(partition(v, model.patch));
    for (std::size_t k = 0; k < masks_per_volume; ++k) {
      const BinaryMask mask = strategy.draw(model.num_positions(), model.num_modalities, rng);
      const auto out = dual_forward<double>(x, mask, params, model, nullptr, false);
      total += mim_loss<double>(out.reconstruction, x, mask, model.patch.voxels()).value;
    }
  }
  return total / static_cast<double>(volumes.size() * masks_per_volume);
}

// ---------------------------------------------------------------------------
// Linear probe

ProbeResult logistic_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                           const ProbeConfig& config) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n) throw std::invalid_argument("probe: one label per feature row required");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("probe: labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  if (by_class[0].empty() || by_class[1].empty()) throw std::invalid_argument("probe: single-class dataset");

  Rng rng(mix_seed(config.seed));
  std::vector<std::size_t> train, test;
  for (auto& cls : by_class) {
    const auto order = rng.sample_without_replacement(cls.size(), cls.size());
    auto k = static_cast<std::size_t>(std::lround(config.train_fraction * static_cast<double>(cls.size())));
    k = std::clamp<std::size_t>(k, 1, cls.size() > 1 ? cls.size() - 1 : 1);
    for (std::size_t j = 0; j < order.size(); ++j) (j < k ? train : test).push_back(cls[order[j]]);
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());

  const Eigen::Index dims = features.cols();
  Eigen::MatrixXd xtr(static_cast<Eigen::Index>(train.size()), dims);
  Eigen::VectorXd ytr(static_cast<Eigen::Index>(train.size()));
  for (std::size_t i = 0; i < train.size(); ++i) {
    xtr.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(train[i]));
    ytr(static_cast<Eigen::Index>(i)) = labels[train[i]];
  }
  const Eigen::RowVectorXd mean = xtr.colwise().mean();
  Eigen::RowVectorXd scale = ((xtr.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index j = 0; j < dims; ++j)
    if (!(scale(j) > 1e-12)) scale(j) = 1.0;
  const auto standardize = [&](const Eigen::MatrixXd& x) -> Eigen::MatrixXd {
    return (x.rowwise() - mean).array().rowwise() / scale.array();
  };
  const Eigen::MatrixXd ztr = standardize(xtr);

  Eigen::VectorXd w = Eigen::VectorXd::Zero(dims);
  double bias = 0.0;
  const double m = static_cast<double>(train.size());
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const Eigen::VectorXd logits = (ztr * w).array() + bias;
    const Eigen::VectorXd p = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
    const Eigen::VectorXd err = p - ytr;
    const Eigen::VectorXd gw = ztr.transpose() * err / m + config.l2 * w;
    w -= config.learning_rate * gw;
    bias -= config.learning_rate * err.sum() / m;
  }
  const auto accuracy = [&](const std::vector<std::size_t>& idx) {
    std::size_t correct = 0;
    for (std::size_t i : idx) {
      const Eigen::MatrixXd z = standardize(features.row(static_cast<Eigen::Index>(i)));
      const double logit = (z * w)(0, 0) + bias;
      correct += ((logit > 0.0 ? 1 : 0) == labels[i]) ? 1 : 0;
    }
    return idx.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(idx.size());
  };
  ProbeResult r;
  r.train_accuracy = accuracy(train);
  r.test_accuracy = accuracy(test);
  r.num_train = train.size();
  r.num_test = test.size();
  return r;
}

Eigen::MatrixXd pooled_features(const ModelParams& params, const EncoderConfig& model,
                                std::span<const MultiModalVolume> volumes) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(volumes.size()), static_cast<Eigen::Index>(model.embed_dim));
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = encode_full(volumes[i], params, model).colwise().mean();
  }
  return out;
}

ProbeResult linear_probe(const ModelParams& params, const EncoderConfig& model, const LabeledDataset& data,
                         const ProbeConfig& config) {
  return logistic_probe(pooled_features(params, model, data.volumes), data.labels, config);
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationRow> ablate(const std::vector<AblationEntry>& entries,
                                std::span<const MultiModalVolume> dataset, const LabeledDataset& probe_data,
                                const ProbeConfig& probe) {
  std::vector<AblationRow> rows;
  for (const auto& e : entries) {
    const auto run = pretrain(e.config, dataset);
    AblationRow row;
    row.name = e.name;
    row.mask = to_string(e.config.mask.kind);
    row.pbt = e.config.pbt_enabled;
    row.l_mim = final_mim(run.log);
    row.var_estimate = run.final_report.variance.mean_var;
    row.trivial_score = run.final_report.trivial.score;
    row.effective_rank = run.final_report.effective_rank;
    row.probe_accuracy = probe_data.volumes.empty()
                             ? std::numeric_limits<double>::quiet_NaN()
                             : linear_probe(run.params, e.config.model, probe_data, probe).test_accuracy;
    rows.push_back(row);
  }
  return rows;
}

std::vector<AblationEntry> default_ablation_grid(const TrainConfig& base) {
  std::vector<AblationEntry> grid;
  for (MaskKind kind : {MaskKind::random, MaskKind::hmp}) {
    for (bool pbt : {false, true}) {
      AblationEntry e;
      e.config = base;
      e.config.mask.kind = kind;
      e.config.pbt_enabled = pbt;
      e.name = std::string(to_string(kind)) + (pbt ? "+pbt" : "");
      grid.push_back(std::move(e));
    }
  }
  return grid;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "name,mask,pbt,l_mim,var_estimate,trivial_score,effective_rank,probe_accuracy\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.mask << ',' << (r.pbt ? 1 : 0) << ',' << format_double(r.l_mim) << ','
        << format_double(r.var_estimate) << ',' << format_double(r.trivial_score) << ','
        << format_double(r.effective_rank) << ',' << format_double(r.probe_accuracy) << '\n';
  }
}

}  // namespace emim
