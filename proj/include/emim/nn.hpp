#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "emim/masking.hpp"
#include "emim/volume.hpp"

namespace emim {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f64, f32 };

struct EncoderConfig {
  std::size_t num_modalities = 4;
  Dims3 dims{16, 16, 16};
  PatchSize patch{4, 4, 4};
  std::size_t depth = 4;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 4;
  /// MLP hidden width = mlp_ratio * embed_dim.
  std::size_t mlp_ratio = 2;
  /// L: features are tapped after layers (depth/L)*l, l = 1..L. A depth-0
  /// encoder has a single tap on the embedded tokens.
  std::size_t pyramid_levels = 4;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;

  std::size_t num_positions() const { return emim::num_positions(dims, patch); }
  std::size_t patch_values() const { return num_modalities * patch.voxels(); }
  std::size_t hidden_dim() const { return mlp_ratio * embed_dim; }
  std::vector<std::size_t> tap_layers() const;
};

void validate(const EncoderConfig& config);
KeyValues to_key_values(const EncoderConfig& config);

template <typename S>
struct BasicBlock {
  Mat<S> ln1_g, ln1_b;
  Mat<S> wq, wk, wv, wo;
  Mat<S> bq, bv, bo;  // no key bias
  Mat<S> ln2_g, ln2_b;
  Mat<S> w1, b1, w2, b2;
};

/// Every trainable tensor. Vectors are stored as 1 x k matrices so that all
/// tensors share one representation.
template <typename S>
struct BasicParams {
  Mat<S> embed_w;     // d x P
  Mat<S> embed_b;     // 1 x d
  Mat<S> pos;         // n x d
  Mat<S> mask_token;  // C x V, voxel values written into hidden blocks
  std::vector<BasicBlock<S>> blocks;
  Mat<S> out_w;  // P x d, the output projection g
  Mat<S> out_b;  // 1 x P

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

  template <typename T>
  BasicParams<T> cast() const;

  /// Same shapes, all zeros.
  BasicParams zeros_like() const;
  std::size_t num_values() const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f);
};

using ModelParams = BasicParams<double>;

/// Deterministic initialization from config.seed.
ModelParams init_params(const EncoderConfig& config);

/// Checks params match the shapes config implies.
void check_shapes(const ModelParams& params, const EncoderConfig& config);

enum class FeatureSource { full_input, masked_input };

struct LatentFeatures {
  std::size_t level = 0;  // 1-based pyramid level (0 for a depth-0 tap)
  std::size_t layer = 0;  // encoder layer the tap follows
  Eigen::MatrixXd matrix;  // n x d
  FeatureSource source = FeatureSource::full_input;
};

/// n x (C*V) matrix whose row i is flatten(patch i over all modalities).
Eigen::MatrixXd patch_matrix(const PatchGrid& grid);

/// token_i = W * row_i + b + pos_i.
template <typename S>
Mat<S> patch_embed(const Mat<S>& patches, const BasicParams<S>& params);

/// Copies `patches` and writes the learned mask token into every hidden block.
template <typename S>
Mat<S> apply_mask_token(const Mat<S>& patches, const BinaryMask& mask, const BasicParams<S>& params,
                        std::size_t voxels_per_block);

template <typename S>
struct BlockCache {
  Mat<S> x_in, xhat1, u1, q, k, v, attn, x1, xhat2, u2, hpre, hact;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd1, rstd2;
  std::vector<Mat<S>> probs;  // per head, n x n
};

template <typename S>
struct BranchCache {
  Mat<S> input;  // patch matrix fed to the embedding (mask token applied)
  std::vector<BlockCache<S>> blocks;
  Mat<S> output;  // tokens after the last block
  bool valid = false;
};

/// Runs the encoder on embedded tokens; returns tokens after each layer in
/// `taps` (layer 0 = embedded tokens). Fills `cache` when non-null.
template <typename S>
std::vector<Mat<S>> encoder_forward(const Mat<S>& tokens, const BasicParams<S>& params,
                                    const std::vector<std::size_t>& taps, std::size_t num_heads,
                                    BranchCache<S>* cache);

template <typename S>
struct DualOutput {
  std::vector<Mat<S>> full;    // per level, empty when the full branch was skipped
  std::vector<Mat<S>> masked;  // per level
  Mat<S> reconstruction;       // n x (C*V), patch-major like PatchGrid
};

template <typename S>
struct DualCache {
  BranchCache<S> full;
  BranchCache<S> masked;
  BinaryMask mask;
};

/// Shared-weight forward: the full branch sees the clean volume, the masked
/// branch sees mask-token blocks; the reconstruction comes from the masked
/// branch. `with_full` = false skips the full branch.
template <typename S>
DualOutput<S> dual_forward(const Mat<S>& patches, const BinaryMask& mask, const BasicParams<S>& params,
                           const EncoderConfig& config, DualCache<S>* cache, bool with_full = true);

/// Loss gradients with respect to the forward outputs. Empty tap vectors mean
/// zero gradient at every level.
template <typename S>
struct DualGrad {
  std::vector<Mat<S>> full;
  std::vector<Mat<S>> masked;
  Mat<S> reconstruction;
};

/// Reverse-mode gradients for every parameter; contributions of the two
/// branches are summed into one store.
template <typename S>
BasicParams<S> backward(const DualCache<S>& cache, const DualGrad<S>& grad, const BasicParams<S>& params,
                        const EncoderConfig& config);

/// Double-precision convenience wrapper returning tagged features.
struct DualResult {
  std::vector<LatentFeatures> full;
  std::vector<LatentFeatures> masked;
  Eigen::MatrixXd reconstruction;
  /// Reconstruction in (c, x, y, z) volume order.
  std::vector<double> reconstruction_volume() const;
  EncoderConfig config;
};

DualResult dual_forward(const MultiModalVolume& volume, const BinaryMask& mask, const ModelParams& params,
                        const EncoderConfig& config);

/// Final-level features of the clean volume (no mask).
Eigen::MatrixXd encode_full(const MultiModalVolume& volume, const ModelParams& params,
                            const EncoderConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints: "EMIM" | u32 len | config text | u32 count | per tensor
// (u32 name len, name, u32 rows, u32 cols, f64 row-major payload), little-endian.

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  EncoderConfig config;
  ModelParams params;
};

std::vector<std::uint8_t> encode_checkpoint(const EncoderConfig& config, const ModelParams& params);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const EncoderConfig& config, const ModelParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parses "model.*" keys into an EncoderConfig; returns false on unknown key.
bool apply_encoder_key(EncoderConfig& config, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------

template <typename S>
template <typename Self, typename F>
void BasicParams<S>::visit_impl(Self& self, F& f) {
  f(std::string("embed.w"), self.embed_w);
  f(std::string("embed.b"), self.embed_b);
  f(std::string("pos"), self.pos);
  f(std::string("mask_token"), self.mask_token);
  for (std::size_t i = 0; i < self.blocks.size(); ++i) {
    auto& b = self.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "ln1.g", b.ln1_g);
    f(p + "ln1.b", b.ln1_b);
    f(p + "attn.wq", b.wq);
    f(p + "attn.wk", b.wk);
    f(p + "attn.wv", b.wv);
    f(p + "attn.wo", b.wo);
    f(p + "attn.bq", b.bq);
    f(p + "attn.bv", b.bv);
    f(p + "attn.bo", b.bo);
    f(p + "ln2.g", b.ln2_g);
    f(p + "ln2.b", b.ln2_b);
    f(p + "mlp.w1", b.w1);
    f(p + "mlp.b1", b.b1);
    f(p + "mlp.w2", b.w2);
    f(p + "mlp.b2", b.b2);
  }
  f(std::string("out.w"), self.out_w);
  f(std::string("out.b"), self.out_b);
}

template <typename S>
template <typename T>
BasicParams<T> BasicParams<S>::cast() const {
  BasicParams<T> out;
  out.blocks.resize(blocks.size());
  std::vector<const Mat<S>*> src;
  visit([&](const std::string&, const Mat<S>& m) { src.push_back(&m); });
  std::size_t i = 0;
  out.visit([&](const std::string&, Mat<T>& m) { m = src[i++]->template cast<T>(); });
  return out;
}

template <typename S>
BasicParams<S> BasicParams<S>::zeros_like() const {
  BasicParams out = *this;
  out.visit([](const std::string&, Mat<S>& m) { m.setZero(); });
  return out;
}

template <typename S>
std::size_t BasicParams<S>::num_values() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Mat<S>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

}  // namespace emim
