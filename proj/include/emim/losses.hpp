#pragma once

#include <vector>

#include "emim/masking.hpp"
#include "emim/nn.hpp"

namespace emim {

/// Value plus gradient with respect to the first argument(s).
template <typename S>
struct MimLossResult {
  S value = 0;
  Mat<S> grad;  // d loss / d reconstruction, same shape
};

/// Mean squared error over the voxels of masked blocks (or every voxel when
/// `full_volume`). Both matrices are n x (C*V) patch-major.
template <typename S>
MimLossResult<S> mim_loss(const Mat<S>& reconstruction, const Mat<S>& target, const BinaryMask& mask,
                          std::size_t voxels_per_block, bool full_volume = false);

/// C_ij = cosine(row i of z_full, row j of z_masked).
template <typename S>
Mat<S> cross_correlation(const Mat<S>& z_full, const Mat<S>& z_masked);

template <typename S>
struct PbtCorrelationLoss {
  S value = 0;
  S on_diagonal = 0;
  S off_diagonal = 0;
  Mat<S> grad;  // d loss / d C
};

/// sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2 for a square C.
template <typename S>
PbtCorrelationLoss<S> pbt_correlation_loss(const Mat<S>& c, double lambda = 1.0);

template <typename S>
struct PbtLevelResult {
  S value = 0;
  S on_diagonal = 0;
  S off_diagonal = 0;
  Mat<S> correlation;
  Mat<S> grad_full;
  Mat<S> grad_masked;
};

/// The level loss on C = cross_correlation(z_full, z_masked), with gradients
/// to both feature matrices.
template <typename S>
PbtLevelResult<S> pbt_level_loss(const Mat<S>& z_full, const Mat<S>& z_masked, double lambda = 1.0);

template <typename S>
struct PbtTotalResult {
  S value = 0;
  std::vector<S> per_level;
  std::vector<Mat<S>> grad_full;
  std::vector<Mat<S>> grad_masked;
};

/// Sum of the level losses over every pyramid level.
template <typename S>
PbtTotalResult<S> pbt_total(const std::vector<Mat<S>>& z_full, const std::vector<Mat<S>>& z_masked,
                            double lambda = 1.0);

struct LossBreakdown {
  double l_mim = 0.0;
  double l_pbt_total = 0.0;
  double l_overall = 0.0;  // l_mim + l_pbt_total
  std::vector<double> pbt_per_level;
};

/// Evaluates both terms for one forward pass and the matching output
/// gradient. `use_pbt` = false leaves the PBT term at zero.
template <typename S>
LossBreakdown overall_loss(const DualOutput<S>& out, const Mat<S>& target, const BinaryMask& mask,
                           std::size_t voxels_per_block, bool use_pbt, double lambda, DualGrad<S>* grad,
                           bool full_volume = false);

}  // namespace emim
