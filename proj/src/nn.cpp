#include "emim/nn.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "emim/rng.hpp"
#include "emim/text.hpp"

namespace emim {

// ---------------------------------------------------------------------------
// Config

std::vector<std::size_t> EncoderConfig::tap_layers() const {
  if (depth == 0) return {0};
  std::vector<std::size_t> taps;
  const std::size_t stride = depth / pyramid_levels;
  for (std::size_t l = 1; l <= pyramid_levels; ++l) taps.push_back(stride * l);
  return taps;
}

void validate(const EncoderConfig& config) {
  if (config.num_modalities == 0) throw std::invalid_argument("model.num_modalities must be positive");
  config.num_positions();
  if (config.embed_dim == 0 || config.num_heads == 0) {
    throw std::invalid_argument("model.embed_dim and model.num_heads must be positive");
  }
  if (config.embed_dim % config.num_heads != 0) {
    throw std::invalid_argument("model.embed_dim must be divisible by model.num_heads");
  }
  if (config.mlp_ratio == 0) throw std::invalid_argument("model.mlp_ratio must be positive");
  if (config.depth > 0) {
    if (config.pyramid_levels == 0 || config.depth % config.pyramid_levels != 0) {
      throw std::invalid_argument("model.depth must be divisible by model.pyramid_levels");
    }
  }
}

KeyValues to_key_values(const EncoderConfig& c) {
  KeyValues kv;
  kv.emplace_back("model.num_modalities", std::to_string(c.num_modalities));
  kv.emplace_back("model.dims", std::to_string(c.dims.h) + "," + std::to_string(c.dims.w) + "," +
                                    std::to_string(c.dims.d));
  kv.emplace_back("model.patch", std::to_string(c.patch.ph) + "," + std::to_string(c.patch.pw) + "," +
                                     std::to_string(c.patch.pd));
  kv.emplace_back("model.depth", std::to_string(c.depth));
  kv.emplace_back("model.embed_dim", std::to_string(c.embed_dim));
  kv.emplace_back("model.num_heads", std::to_string(c.num_heads));
  kv.emplace_back("model.mlp_ratio", std::to_string(c.mlp_ratio));
  kv.emplace_back("model.pyramid_levels", std::to_string(c.pyramid_levels));
  kv.emplace_back("model.seed", std::to_string(c.seed));
  kv.emplace_back("model.precision", c.precision == Precision::f64 ? "f64" : "f32");
  return kv;
}

namespace {

bool parse_triple(const std::string& value, std::size_t& a, std::size_t& b, std::size_t& c) {
  std::istringstream in(value);
  char s1 = 0, s2 = 0;
  if (!(in >> a >> s1 >> b >> s2 >> c) || s1 != ',' || s2 != ',') return false;
  in >> std::ws;
  return in.eof();
}

std::size_t to_size(const std::string& key, const std::string& value) {
  const auto v = parse_u64(value);
  if (!v) throw std::invalid_argument("invalid integer for " + key + ": '" + value + "'");
  return static_cast<std::size_t>(*v);
}

}  // namespace

bool apply_encoder_key(EncoderConfig& c, const std::string& key, const std::string& value) {
  if (key == "model.num_modalities") c.num_modalities = to_size(key, value);
  else if (key == "model.dims") {
    if (!parse_triple(value, c.dims.h, c.dims.w, c.dims.d)) throw std::invalid_argument("invalid model.dims");
  } else if (key == "model.patch") {
    if (!parse_triple(value, c.patch.ph, c.patch.pw, c.patch.pd)) throw std::invalid_argument("invalid model.patch");
  } else if (key == "model.depth") c.depth = to_size(key, value);
  else if (key == "model.embed_dim") c.embed_dim = to_size(key, value);
  else if (key == "model.num_heads") c.num_heads = to_size(key, value);
  else if (key == "model.mlp_ratio") c.mlp_ratio = to_size(key, value);
  else if (key == "model.pyramid_levels") c.pyramid_levels = to_size(key, value);
  else if (key == "model.seed") c.seed = to_size(key, value);
  else if (key == "model.precision") {
    if (value == "f64") c.precision = Precision::f64;
    else if (value == "f32") c.precision = Precision::f32;
    else throw std::invalid_argument("model.precision must be f64 or f32");
  } else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Init

namespace {

Mat<double> gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = stddev * rng.normal();
  return m;
}

constexpr double kLayerNormEps = 1e-5;
constexpr double kPositionStd = 1.0;
constexpr double kOutputStd = 0.02;

}  // namespace

ModelParams init_params(const EncoderConfig& config) {
  validate(config);
  const std::size_t d = config.embed_dim;
  const std::size_t m = config.hidden_dim();
  const std::size_t p = config.patch_values();
  const std::size_t n = config.num_positions();
  Rng rng(mix_seed(config.seed));

  ModelParams params;
  params.embed_w = gaussian(rng, d, p, 1.0 / std::sqrt(static_cast<double>(p)));
  params.embed_b = Mat<double>::Zero(1, d);
  params.pos = gaussian(rng, n, d, kPositionStd);
  params.mask_token = Mat<double>::Zero(config.num_modalities, config.patch.voxels());
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t b = 0; b < config.depth; ++b) {
    BasicBlock<double> blk;
    blk.ln1_g = Mat<double>::Ones(1, d);
    blk.ln1_b = Mat<double>::Zero(1, d);
    blk.wq = gaussian(rng, d, d, sd);
    blk.wk = gaussian(rng, d, d, sd);
    blk.wv = gaussian(rng, d, d, sd);
    blk.wo = gaussian(rng, d, d, sd);
    blk.bq = Mat<double>::Zero(1, d);
    blk.bv = Mat<double>::Zero(1, d);
    blk.bo = Mat<double>::Zero(1, d);
    blk.ln2_g = Mat<double>::Ones(1, d);
    blk.ln2_b = Mat<double>::Zero(1, d);
    blk.w1 = gaussian(rng, m, d, sd);
    blk.b1 = Mat<double>::Zero(1, m);
    blk.w2 = gaussian(rng, d, m, 1.0 / std::sqrt(static_cast<double>(m)));
    blk.b2 = Mat<double>::Zero(1, d);
    params.blocks.push_back(std::move(blk));
  }
  params.out_w = gaussian(rng, p, d, kOutputStd);
  params.out_b = Mat<double>::Zero(1, p);
  return params;
}

void check_shapes(const ModelParams& params, const EncoderConfig& config) {
  const ModelParams ref = [&] {
    EncoderConfig c = config;
    return init_params(c).zeros_like();
  }();
  if (params.blocks.size() != ref.blocks.size()) {
    throw CheckpointError("parameter store has " + std::to_string(params.blocks.size()) +
                          " blocks, config expects " + std::to_string(ref.blocks.size()));
  }
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> want;
  ref.visit([&](const std::string& name, const Mat<double>& m) { want.push_back({name, {m.rows(), m.cols()}}); });
  std::size_t i = 0;
  params.visit([&](const std::string& name, const Mat<double>& m) {
    const auto& [wname, shape] = want[i++];
    if (m.rows() != shape.first || m.cols() != shape.second) {
      throw CheckpointError("tensor " + name + " has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", config expects " + std::to_string(shape.first) +
                            "x" + std::to_string(shape.second));
    }
  });
}

// ---------------------------------------------------------------------------
// Forward

Eigen::MatrixXd patch_matrix(const PatchGrid& grid) {
  const auto rows = static_cast<Eigen::Index>(grid.num_positions());
  const auto cols = static_cast<Eigen::Index>(grid.row_size());
  Eigen::MatrixXd m(rows, cols);
  const auto data = grid.data();
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = data[static_cast<std::size_t>(i * cols + j)];
  return m;
}

template <typename S>
Mat<S> patch_embed(const Mat<S>& patches, const BasicParams<S>& params) {
  if (patches.cols() != params.embed_w.cols() || patches.rows() != params.pos.rows()) {
    throw std::invalid_argument("patch_embed: patch matrix is " + std::to_string(patches.rows()) + "x" +
                                std::to_string(patches.cols()) + ", model expects " +
                                std::to_string(params.pos.rows()) + "x" + std::to_string(params.embed_w.cols()));
  }
  Mat<S> tokens = patches * params.embed_w.transpose();
  tokens.rowwise() += params.embed_b.row(0);
  tokens += params.pos;
  return tokens;
}

template <typename S>
Mat<S> apply_mask_token(const Mat<S>& patches, const BinaryMask& mask, const BasicParams<S>& params,
                        std::size_t voxels_per_block) {
  if (static_cast<Eigen::Index>(mask.num_positions()) != patches.rows() ||
      static_cast<Eigen::Index>(mask.num_modalities() * voxels_per_block) != patches.cols()) {
    throw MaskError("mask shape does not match patch matrix");
  }
  Mat<S> out = patches;
  const auto v = static_cast<Eigen::Index>(voxels_per_block);
  for (std::size_t c = 0; c < mask.num_modalities(); ++c)
    for (std::size_t i = 0; i < mask.num_positions(); ++i)
      if (mask.masked(c, i)) {
        out.row(static_cast<Eigen::Index>(i)).segment(static_cast<Eigen::Index>(c) * v, v) =
            params.mask_token.row(static_cast<Eigen::Index>(c));
      }
  return out;
}

namespace {

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
void layer_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, Mat<S>& xhat, Vec<S>& rstd, Mat<S>& out) {
  const auto d = static_cast<S>(x.cols());
  Vec<S> mean = x.rowwise().sum() / d;
  xhat = x.colwise() - mean;
  Vec<S> var = xhat.array().square().rowwise().sum() / d;
  rstd = (var.array() + static_cast<S>(kLayerNormEps)).rsqrt();
  xhat = rstd.asDiagonal() * xhat;
  out = (xhat.array().rowwise() * g.row(0).array()).matrix();
  out.rowwise() += b.row(0);
}

// Returns dL/dx and accumulates dg, db.
template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dout, const Mat<S>& xhat, const Vec<S>& rstd, const Mat<S>& g,
                           Mat<S>& dg, Mat<S>& db) {
  dg += (dout.array() * xhat.array()).colwise().sum().matrix();
  db += dout.colwise().sum();
  Mat<S> dxhat = (dout.array().rowwise() * g.row(0).array()).matrix();
  const auto d = static_cast<S>(xhat.cols());
  Vec<S> mean_d = dxhat.rowwise().sum() / d;
  Vec<S> mean_dx = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / d;
  Mat<S> dx = dxhat.colwise() - mean_d;
  dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
  return rstd.asDiagonal() * dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename S>
S gelu(S x) {
  const S t = std::tanh(static_cast<S>(kGeluC) * (x + static_cast<S>(kGeluA) * x * x * x));
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + t);
}

template <typename S>
S gelu_grad(S x) {
  const S inner = static_cast<S>(kGeluC) * (x + static_cast<S>(kGeluA) * x * x * x);
  const S t = std::tanh(inner);
  const S dinner = static_cast<S>(kGeluC) * (static_cast<S>(1) + static_cast<S>(3 * kGeluA) * x * x);
  return static_cast<S>(0.5) * (static_cast<S>(1) + t) + static_cast<S>(0.5) * x * (static_cast<S>(1) - t * t) * dinner;
}

template <typename S>
void row_softmax(Mat<S>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const S mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

template <typename S>
Mat<S> block_forward(const Mat<S>& x, const BasicBlock<S>& p, std::size_t heads, BlockCache<S>* cache,
                     std::size_t block_index) {
  BlockCache<S> local;
  BlockCache<S>& c = cache ? *cache : local;
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const S scale = static_cast<S>(1) / std::sqrt(static_cast<S>(dh));

  c.x_in = x;
  layer_norm(x, p.ln1_g, p.ln1_b, c.xhat1, c.rstd1, c.u1);
  c.q = c.u1 * p.wq.transpose();
  c.q.rowwise() += p.bq.row(0);
  c.k = c.u1 * p.wk.transpose();
  c.v = c.u1 * p.wv.transpose();
  c.v.rowwise() += p.bv.row(0);
  c.attn.resize(x.rows(), d);
  c.probs.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    Mat<S> scores = (c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose()) * scale;
    row_softmax(scores);
    c.attn.middleCols(off, dh) = scores * c.v.middleCols(off, dh);
    c.probs[h] = std::move(scores);
  }
  c.x1 = x + c.attn * p.wo.transpose();
  c.x1.rowwise() += p.bo.row(0);

  layer_norm(c.x1, p.ln2_g, p.ln2_b, c.xhat2, c.rstd2, c.u2);
  c.hpre = c.u2 * p.w1.transpose();
  c.hpre.rowwise() += p.b1.row(0);
  c.hact = c.hpre.unaryExpr([](S v) { return gelu(v); });
  Mat<S> out = c.x1 + c.hact * p.w2.transpose();
  out.rowwise() += p.b2.row(0);
  if (!out.allFinite()) {
    throw NumericalError("non-finite activation in encoder block " + std::to_string(block_index));
  }
  return out;
}

// Returns dL/dx_in and accumulates parameter gradients into g.
template <typename S>
Mat<S> block_backward(const Mat<S>& dout, const BlockCache<S>& c, const BasicBlock<S>& p, BasicBlock<S>& g,
                      std::size_t heads) {
  const Eigen::Index d = c.x_in.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const S scale = static_cast<S>(1) / std::sqrt(static_cast<S>(dh));

  // MLP
  g.w2 += dout.transpose() * c.hact;
  g.b2 += dout.colwise().sum();
  Mat<S> dh_act = dout * p.w2;
  Mat<S> dh_pre = (dh_act.array() * c.hpre.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  g.w1 += dh_pre.transpose() * c.u2;
  g.b1 += dh_pre.colwise().sum();
  Mat<S> du2 = dh_pre * p.w1;
  Mat<S> dx1 = dout + layer_norm_backward(du2, c.xhat2, c.rstd2, p.ln2_g, g.ln2_g, g.ln2_b);

  // Attention
  g.wo += dx1.transpose() * c.attn;
  g.bo += dx1.colwise().sum();
  Mat<S> dattn = dx1 * p.wo;
  Mat<S> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    const Mat<S>& a = c.probs[h];
    const auto dO = dattn.middleCols(off, dh);
    Mat<S> da = dO * c.v.middleCols(off, dh).transpose();
    dv.middleCols(off, dh) = a.transpose() * dO;
    Vec<S> row_dot = (da.array() * a.array()).rowwise().sum();
    Mat<S> ds = (a.array() * (da.colwise() - row_dot).array()).matrix() * scale;
    dq.middleCols(off, dh) = ds * c.k.middleCols(off, dh);
    dk.middleCols(off, dh) = ds.transpose() * c.q.middleCols(off, dh);
  }
  g.wq += dq.transpose() * c.u1;
  g.wk += dk.transpose() * c.u1;
  g.wv += dv.transpose() * c.u1;
  g.bq += dq.colwise().sum();
  g.bv += dv.colwise().sum();
  Mat<S> du1 = dq * p.wq + dk * p.wk + dv * p.wv;
  return dx1 + layer_norm_backward(du1, c.xhat1, c.rstd1, p.ln1_g, g.ln1_g, g.ln1_b);
}

}  // namespace

template <typename S>
std::vector<Mat<S>> encoder_forward(const Mat<S>& tokens, const BasicParams<S>& params,
                                    const std::vector<std::size_t>& taps, std::size_t num_heads,
                                    BranchCache<S>* cache) {
  const std::size_t depth = params.blocks.size();
  for (std::size_t t : taps) {
    if (t > depth) throw std::invalid_argument("tap layer " + std::to_string(t) + " exceeds encoder depth");
  }
  if (cache) {
    cache->blocks.resize(depth);
    cache->valid = true;
  }
  std::vector<Mat<S>> out(taps.size());
  const auto emit = [&](std::size_t layer, const Mat<S>& x) {
    for (std::size_t i = 0; i < taps.size(); ++i)
      if (taps[i] == layer) out[i] = x;
  };
  Mat<S> x = tokens;
  emit(0, x);
  for (std::size_t b = 0; b < depth; ++b) {
    x = block_forward(x, params.blocks[b], num_heads, cache ? &cache->blocks[b] : nullptr, b);
    emit(b + 1, x);
  }
  if (cache) cache->output = x;
  return out;
}

template <typename S>
DualOutput<S> dual_forward(const Mat<S>& patches, const BinaryMask& mask, const BasicParams<S>& params,
                           const EncoderConfig& config, DualCache<S>* cache, bool with_full) {
  const auto taps = config.tap_layers();
  DualOutput<S> out;
  Mat<S> masked_input = apply_mask_token(patches, mask, params, config.patch.voxels());
  if (with_full) {
    if (cache) cache->full.input = patches;
    out.full = encoder_forward(patch_embed(patches, params), params, taps, config.num_heads,
                               cache ? &cache->full : nullptr);
  } else if (cache) {
    cache->full = BranchCache<S>{};
  }
  Mat<S> tokens = patch_embed(masked_input, params);
  if (cache) {
    cache->masked.input = std::move(masked_input);
    cache->mask = mask;
  }
  out.masked = encoder_forward(tokens, params, taps, config.num_heads, cache ? &cache->masked : nullptr);
  out.reconstruction = out.masked.back() * params.out_w.transpose();
  out.reconstruction.rowwise() += params.out_b.row(0);
  if (!out.reconstruction.allFinite()) throw NumericalError("non-finite reconstruction");
  return out;
}

namespace {

template <typename S>
void branch_backward(const BranchCache<S>& cache, const std::vector<Mat<S>>& tap_grads,
                     const std::vector<std::size_t>& taps, const Mat<S>* extra_final,
                     const BasicParams<S>& params, BasicParams<S>& g, std::size_t heads,
                     const BinaryMask* mask, std::size_t voxels) {
  const std::size_t depth = params.blocks.size();
  const Eigen::Index n = params.pos.rows();
  const Eigen::Index d = params.pos.cols();
  Mat<S> dx = Mat<S>::Zero(n, d);
  const auto add_taps = [&](std::size_t layer) {
    for (std::size_t i = 0; i < taps.size() && i < tap_grads.size(); ++i)
      if (taps[i] == layer && tap_grads[i].size() > 0) dx += tap_grads[i];
  };
  add_taps(depth);
  if (extra_final) dx += *extra_final;
  for (std::size_t b = depth; b-- > 0;) {
    dx = block_backward(dx, cache.blocks[b], params.blocks[b], g.blocks[b], heads);
    add_taps(b);
  }
  g.embed_w += dx.transpose() * cache.input;
  g.embed_b += dx.colwise().sum();
  g.pos += dx;
  if (mask) {
    const Mat<S> dinput = dx * params.embed_w;
    const auto v = static_cast<Eigen::Index>(voxels);
    for (std::size_t c = 0; c < mask->num_modalities(); ++c)
      for (std::size_t i = 0; i < mask->num_positions(); ++i)
        if (mask->masked(c, i)) {
          g.mask_token.row(static_cast<Eigen::Index>(c)) +=
              dinput.row(static_cast<Eigen::Index>(i)).segment(static_cast<Eigen::Index>(c) * v, v);
        }
  }
}

bool any_nonempty(const auto& mats) {
  for (const auto& m : mats)
    if (m.size() > 0) return true;
  return false;
}

}  // namespace

template <typename S>
BasicParams<S> backward(const DualCache<S>& cache, const DualGrad<S>& grad, const BasicParams<S>& params,
                        const EncoderConfig& config) {
  if (!cache.masked.valid) throw std::invalid_argument("backward: forward cache is empty");
  const auto taps = config.tap_layers();
  BasicParams<S> g = params.zeros_like();
  Mat<S> dfinal;
  const Mat<S>* extra = nullptr;
  if (grad.reconstruction.size() > 0) {
    g.out_w += grad.reconstruction.transpose() * cache.masked.output;
    g.out_b += grad.reconstruction.colwise().sum();
    dfinal = grad.reconstruction * params.out_w;
    extra = &dfinal;
  }
  branch_backward(cache.masked, grad.masked, taps, extra, params, g, config.num_heads, &cache.mask,
                  config.patch.voxels());
  if (any_nonempty(grad.full)) {
    if (!cache.full.valid) throw std::invalid_argument("backward: full branch was not run");
    branch_backward<S>(cache.full, grad.full, taps, nullptr, params, g, config.num_heads, nullptr, 0);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Double wrappers

std::vector<double> DualResult::reconstruction_volume() const {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = reconstruction;
  return patches_to_volume_layout(std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())),
                                  config.num_modalities, config.dims, config.patch);
}

namespace {

void check_volume(const MultiModalVolume& volume, const EncoderConfig& config) {
  if (volume.num_modalities() != config.num_modalities || !(volume.dims() == config.dims)) {
    throw std::invalid_argument("volume shape does not match the model config");
  }
}

std::vector<LatentFeatures> tag(std::vector<Mat<double>> mats, const std::vector<std::size_t>& taps,
                                FeatureSource source) {
  std::vector<LatentFeatures> out;
  for (std::size_t i = 0; i < mats.size(); ++i) {
    out.push_back({taps[i] == 0 ? 0 : i + 1, taps[i], std::move(mats[i]), source});
  }
  return out;
}

}  // namespace

DualResult dual_forward(const MultiModalVolume& volume, const BinaryMask& mask, const ModelParams& params,
                        const EncoderConfig& config) {
  check_volume(volume, config);
  const Eigen::MatrixXd patches = patch_matrix(partition(volume, config.patch));
  auto out = dual_forward<double>(patches, mask, params, config, nullptr, true);
  const auto taps = config.tap_layers();
  DualResult r;
  r.full = tag(std::move(out.full), taps, FeatureSource::full_input);
  r.masked = tag(std::move(out.masked), taps, FeatureSource::masked_input);
  r.reconstruction = std::move(out.reconstruction);
  r.config = config;
  return r;
}

Eigen::MatrixXd encode_full(const MultiModalVolume& volume, const ModelParams& params,
                            const EncoderConfig& config) {
  check_volume(volume, config);
  const Eigen::MatrixXd patches = patch_matrix(partition(volume, config.patch));
  auto feats = encoder_forward<double>(patch_embed<double>(patches, params), params,
                                       {config.tap_layers().back()}, config.num_heads, nullptr);
  return std::move(feats.back());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'E', 'M', 'I', 'M'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t k) const {
    if (bytes.size() - pos < k) throw CheckpointError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string text(std::size_t k) {
    need(k);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + k));
    pos += k;
    return s;
  }
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const EncoderConfig& config, const ModelParams& params) {
  check_shapes(params, config);
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  std::string text;
  for (const auto& [k, v] : to_key_values(config)) text += k + "=" + v + "\n";
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Mat<double>&) { ++count; });
  put_u32(out, count);
  params.visit([&](const std::string& name, const Mat<double>& m) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(out, m(i, j));
  });
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  Reader r{bytes, 4};
  Checkpoint ck;
  std::istringstream text(r.text(r.u32()));
  std::string line;
  while (std::getline(text, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw CheckpointError("malformed checkpoint config line");
    const std::string key(t.substr(0, eq));
    try {
      if (!apply_encoder_key(ck.config, key, std::string(t.substr(eq + 1)))) {
        throw CheckpointError("unknown checkpoint config key " + key);
      }
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(e.what());
    }
  }
  try {
    validate(ck.config);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  ck.params = init_params(ck.config).zeros_like();
  const std::uint32_t count = r.u32();
  std::uint32_t expected = 0;
  ck.params.visit([&](const std::string&, const Mat<double>&) { ++expected; });
  if (count != expected) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(expected));
  }
  ck.params.visit([&](const std::string& name, Mat<double>& m) {
    const std::string got = r.text(r.u32());
    if (got != name) throw CheckpointError("expected tensor " + name + ", found " + got);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows != m.rows() || cols != m.cols()) throw CheckpointError("tensor " + name + " has the wrong shape");
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  });
  if (r.pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config, const ModelParams& params) {
  const auto bytes = encode_checkpoint(config, params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------

#define EMIM_INSTANTIATE(S)                                                                                 \
  template Mat<S> patch_embed<S>(const Mat<S>&, const BasicParams<S>&);                                    \
  template Mat<S> apply_mask_token<S>(const Mat<S>&, const BinaryMask&, const BasicParams<S>&, std::size_t); \
  template std::vector<Mat<S>> encoder_forward<S>(const Mat<S>&, const BasicParams<S>&,                    \
                                                  const std::vector<std::size_t>&, std::size_t,            \
                                                  BranchCache<S>*);                                         \
  template DualOutput<S> dual_forward<S>(const Mat<S>&, const BinaryMask&, const BasicParams<S>&,          \
                                         const EncoderConfig&, DualCache<S>*, bool);                        \
  template BasicParams<S> backward<S>(const DualCache<S>&, const DualGrad<S>&, const BasicParams<S>&,      \
                                      const EncoderConfig&);

EMIM_INSTANTIATE(double)
EMIM_INSTANTIATE(float)

#undef EMIM_INSTANTIATE

}  // namespace emim
