#include "emim/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace emim {

template <typename S>
MimLossResult<S> mim_loss(const Mat<S>& reconstruction, const Mat<S>& target, const BinaryMask& mask,
                          std::size_t voxels_per_block, bool full_volume) {
  if (reconstruction.rows() != target.rows() || reconstruction.cols() != target.cols()) {
    throw std::invalid_argument("mim_loss: reconstruction and target shapes differ");
  }
  if (static_cast<Eigen::Index>(mask.num_positions()) != target.rows() ||
      static_cast<Eigen::Index>(mask.num_modalities() * voxels_per_block) != target.cols()) {
    throw MaskError("mim_loss: mask shape does not match the patch matrix");
  }
  MimLossResult<S> r;
  r.grad = Mat<S>::Zero(target.rows(), target.cols());
  const auto v = static_cast<Eigen::Index>(voxels_per_block);
  std::size_t cells = 0;
  for (std::size_t c = 0; c < mask.num_modalities(); ++c)
    for (std::size_t i = 0; i < mask.num_positions(); ++i)
      if (full_volume || mask.masked(c, i)) {
        const auto row = static_cast<Eigen::Index>(i);
        const auto col = static_cast<Eigen::Index>(c) * v;
        r.grad.row(row).segment(col, v) =
            reconstruction.row(row).segment(col, v) - target.row(row).segment(col, v);
        ++cells;
      }
  if (cells == 0) throw MaskError("mim_loss: mask is empty, nothing to reconstruct");
  const S count = static_cast<S>(cells) * static_cast<S>(voxels_per_block);
  r.value = r.grad.squaredNorm() / count;
  r.grad *= static_cast<S>(2) / count;
  return r;
}

namespace {

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> row_norms(const Mat<S>& z) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> n = z.rowwise().norm();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    if (!(n(i) > 0)) throw NumericalError("zero-norm feature row " + std::to_string(i));
  }
  return n;
}

// Backprop through u = z / |z| row-wise.
template <typename S>
Mat<S> normalize_backward(const Mat<S>& du, const Mat<S>& u, const Eigen::Matrix<S, Eigen::Dynamic, 1>& norms) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> dots = (du.array() * u.array()).rowwise().sum();
  Mat<S> dz = du - (u.array().colwise() * dots.array()).matrix();
  return norms.cwiseInverse().asDiagonal() * dz;
}

}  // namespace

template <typename S>
Mat<S> cross_correlation(const Mat<S>& z_full, const Mat<S>& z_masked) {
  if (z_full.rows() != z_masked.rows() || z_full.cols() != z_masked.cols()) {
    throw std::invalid_argument("cross_correlation: feature shapes differ");
  }
  const Mat<S> a = row_norms(z_full).cwiseInverse().asDiagonal() * z_full;
  const Mat<S> b = row_norms(z_masked).cwiseInverse().asDiagonal() * z_masked;
  return a * b.transpose();
}

template <typename S>
PbtCorrelationLoss<S> pbt_correlation_loss(const Mat<S>& c, double lambda) {
  if (c.rows() != c.cols()) throw std::invalid_argument("pbt loss needs a square correlation matrix");
  PbtCorrelationLoss<S> r;
  const S lam = static_cast<S>(lambda);
  r.grad = (static_cast<S>(2) * lam) * c;
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    const S cii = c(i, i);
    r.on_diagonal += (1 - cii) * (1 - cii);
    r.grad(i, i) = -2 * (1 - cii);
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      if (j != i) r.off_diagonal += c(i, j) * c(i, j);
  }
  r.value = r.on_diagonal + lam * r.off_diagonal;
  return r;
}

template <typename S>
PbtLevelResult<S> pbt_level_loss(const Mat<S>& z_full, const Mat<S>& z_masked, double lambda) {
  if (z_full.rows() != z_masked.rows() || z_full.cols() != z_masked.cols()) {
    throw std::invalid_argument("pbt_level_loss: feature shapes differ");
  }
  const auto na = row_norms(z_full);
  const auto nb = row_norms(z_masked);
  const Mat<S> a = na.cwiseInverse().asDiagonal() * z_full;
  const Mat<S> b = nb.cwiseInverse().asDiagonal() * z_masked;
  PbtLevelResult<S> r;
  r.correlation = a * b.transpose();
  const auto terms = pbt_correlation_loss(r.correlation, lambda);
  r.on_diagonal = terms.on_diagonal;
  r.off_diagonal = terms.off_diagonal;
  r.value = terms.value;
  const Mat<S>& dc = terms.grad;
  r.grad_full = normalize_backward<S>(dc * b, a, na);
  r.grad_masked = normalize_backward<S>(dc.transpose() * a, b, nb);
  return r;
}

template <typename S>
PbtTotalResult<S> pbt_total(const std::vector<Mat<S>>& z_full, const std::vector<Mat<S>>& z_masked,
                            double lambda) {
  if (z_full.size() != z_masked.size()) throw std::invalid_argument("pbt_total: level counts differ");
  PbtTotalResult<S> r;
  for (std::size_t l = 0; l < z_full.size(); ++l) {
    auto level = pbt_level_loss(z_full[l], z_masked[l], lambda);
    r.value += level.value;
    r.per_level.push_back(level.value);
    r.grad_full.push_back(std::move(level.grad_full));
    r.grad_masked.push_back(std::move(level.grad_masked));
  }
  return r;
}

template <typename S>
LossBreakdown overall_loss(const DualOutput<S>& out, const Mat<S>& target, const BinaryMask& mask,
                           std::size_t voxels_per_block, bool use_pbt, double lambda, DualGrad<S>* grad,
                           bool full_volume) {
  LossBreakdown b;
  auto mim = mim_loss(out.reconstruction, target, mask, voxels_per_block, full_volume);
  b.l_mim = static_cast<double>(mim.value);
  if (grad) {
    grad->reconstruction = std::move(mim.grad);
    grad->full.clear();
    grad->masked.clear();
  }
  if (use_pbt) {
    if (out.full.empty()) throw std::invalid_argument("overall_loss: PBT needs the full branch");
    auto pbt = pbt_total(out.full, out.masked, lambda);
    b.l_pbt_total = static_cast<double>(pbt.value);
    for (S v : pbt.per_level) b.pbt_per_level.push_back(static_cast<double>(v));
    if (grad) {
      grad->full = std::move(pbt.grad_full);
      grad->masked = std::move(pbt.grad_masked);
    }
  }
  b.l_overall = b.l_mim + b.l_pbt_total;
  if (!std::isfinite(b.l_overall)) throw NumericalError("non-finite loss");
  return b;
}

#define EMIM_INSTANTIATE(S)                                                                               \
  template MimLossResult<S> mim_loss<S>(const Mat<S>&, const Mat<S>&, const BinaryMask&, std::size_t, bool); \
  template Mat<S> cross_correlation<S>(const Mat<S>&, const Mat<S>&);                                     \
  template PbtCorrelationLoss<S> pbt_correlation_loss<S>(const Mat<S>&, double);                           \
  template PbtLevelResult<S> pbt_level_loss<S>(const Mat<S>&, const Mat<S>&, double);                     \
  template PbtTotalResult<S> pbt_total<S>(const std::vector<Mat<S>>&, const std::vector<Mat<S>>&, double); \
  template LossBreakdown overall_loss<S>(const DualOutput<S>&, const Mat<S>&, const BinaryMask&,          \
                                         std::size_t, bool, double, DualGrad<S>*, bool);

EMIM_INSTANTIATE(double)
EMIM_INSTANTIATE(float)

#undef EMIM_INSTANTIATE

}  // namespace emim
