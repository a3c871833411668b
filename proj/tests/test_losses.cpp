#include <doctest.h>

#include <cmath>

#include "emim/diagnostics.hpp"
#include "emim/losses.hpp"
#include "fixtures.hpp"

using namespace emim;
using Eigen::MatrixXd;

namespace {

MatrixXd normal_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  MatrixXd x(r, c);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("mim loss: arithmetic") {
  BinaryMask m(1, 2);
  m.set(0, 1, MaskPhase::patch);
  MatrixXd t = MatrixXd::Zero(2, 1);
  CHECK(mim_loss<double>(t, t, m, 1).value == 0.0);
  MatrixXd r = t;
  r(1, 0) = 0.5;
  r(0, 0) = 9.0;  // visible, ignored
  const auto l = mim_loss<double>(r, t, m, 1);
  CHECK(l.value == doctest::Approx(0.25));
  CHECK(l.grad(1, 0) == doctest::Approx(1.0));
  CHECK(l.grad(0, 0) == 0.0);
  CHECK_THROWS_AS(mim_loss<double>(r, t, BinaryMask(1, 2), 1), MaskError);
}

TEST_CASE("mim loss: mean-field output attains the exhaustive masked variance") {
  const auto vs = fixture::uniform_volumes(8, 2, {6, 2, 2}, 17);
  const PatchSize patch{1, 2, 2};
  const double exact = fixture::exhaustive_random_variance(vs, patch, 3);
  const auto mean = mean_field(vs);
  const MultiModalVolume mean_vol(2, {6, 2, 2}, std::vector<float>(mean.begin(), mean.end()));
  auto as_matrix = [&](const MultiModalVolume& v) {
    const PatchGrid g = partition(v, patch);
    MatrixXd m(g.num_positions(), g.row_size());
    for (std::size_t i = 0; i < g.num_positions(); ++i)
      for (std::size_t j = 0; j < g.row_size(); ++j) m(i, j) = g.row(i)[j];
    return m;
  };
  const MatrixXd recon = as_matrix(mean_vol);
  double total = 0.0;
  std::size_t count = 0;
  for (std::uint64_t subset = 0; subset < 64; ++subset) {
    if (__builtin_popcountll(subset) != 3) continue;
    BinaryMask m(2, 6);
    for (std::size_t i = 0; i < 6; ++i)
      if ((subset >> i) & 1) m.set(0, i, MaskPhase::random), m.set(1, i, MaskPhase::random);
    for (const auto& v : vs) {
      total += mim_loss<double>(recon, as_matrix(v), m, patch.voxels()).value;
      ++count;
    }
  }
  // mean_vol stores the mean as float; allow for that rounding.
  CHECK(total / count == doctest::Approx(exact).epsilon(1e-6));
}

TEST_CASE("cross-correlation: closed cases") {
  const MatrixXd eye = MatrixXd::Identity(3, 3);
  CHECK(cross_correlation<double>(eye, eye).isApprox(eye, 1e-15));

  MatrixXd same(3, 2);
  same << 1, 2, 1, 2, 1, 2;
  CHECK(cross_correlation<double>(same, same).isApprox(MatrixXd::Ones(3, 3), 1e-15));

  MatrixXd f(2, 2), g(2, 2), want(2, 2);
  f << 1, 0, 1, 1;
  g << 0, 1, 1, 0;
  const double h = 1.0 / std::sqrt(2.0);
  want << 0, 1, h, h;
  CHECK(cross_correlation<double>(f, g).isApprox(want, 1e-15));

  MatrixXd z = f;
  z.row(0).setZero();
  CHECK_THROWS_AS(cross_correlation<double>(z, g), NumericalError);
}

TEST_CASE("cross-correlation: entries bounded, row-rescaling invariant") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const MatrixXd a = normal_matrix(5, 4, rng), b = normal_matrix(5, 4, rng);
    const MatrixXd c = cross_correlation<double>(a, b);
    CHECK(c.cwiseAbs().maxCoeff() <= 1.0 + 1e-15);
    MatrixXd as = a, bs = b;
    for (int i = 0; i < 5; ++i) as.row(i) *= 0.1 + 5 * rng.uniform(), bs.row(i) *= 0.1 + 5 * rng.uniform();
    CHECK((cross_correlation<double>(as, bs) - c).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(cross_correlation<double>(a, a).diagonal().isApproxToConstant(1.0, 1e-15));
  }
}

TEST_CASE("correlation loss: closed cases") {
  CHECK(pbt_correlation_loss<double>(MatrixXd::Identity(4, 4)).value == 0.0);
  CHECK(pbt_correlation_loss<double>(MatrixXd::Zero(5, 5)).value == doctest::Approx(5.0));
  CHECK(pbt_correlation_loss<double>(MatrixXd::Ones(2, 2)).value == doctest::Approx(2.0));
  const auto l = pbt_correlation_loss<double>(MatrixXd::Ones(2, 2), 0.5);
  CHECK(l.on_diagonal == 0.0);
  CHECK(l.off_diagonal == doctest::Approx(2.0));
  CHECK(l.value == doctest::Approx(1.0));
}

TEST_CASE("correlation loss: positive away from identity") {
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    MatrixXd c = MatrixXd::Identity(4, 4);
    c(rng.below(4), rng.below(4)) += 0.01 + rng.uniform();
    CHECK(pbt_correlation_loss<double>(c).value > 0.0);
  }
}

TEST_CASE("level loss: gradient matches finite differences") {
  Rng rng(3);
  const MatrixXd a = normal_matrix(4, 3, rng), b = normal_matrix(4, 3, rng);
  const auto l = pbt_level_loss<double>(a, b, 0.7);
  CHECK(pbt_level_loss<double>(a, a).on_diagonal == doctest::Approx(0.0));
  for (int which = 0; which < 2; ++which) {
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      MatrixXd p = which ? b : a, m = p;
      p.data()[i] += 1e-6;
      m.data()[i] -= 1e-6;
      const double fd = which ? (pbt_level_loss<double>(a, p, 0.7).value - pbt_level_loss<double>(a, m, 0.7).value) / 2e-6
                              : (pbt_level_loss<double>(p, b, 0.7).value - pbt_level_loss<double>(m, b, 0.7).value) / 2e-6;
      const double an = which ? l.grad_masked.data()[i] : l.grad_full.data()[i];
      CHECK(an == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("pyramid total sums levels") {
  Rng rng(4);
  std::vector<MatrixXd> f, m;
  double sum = 0.0;
  for (int l = 0; l < 4; ++l) {
    f.push_back(normal_matrix(3, 3, rng));
    m.push_back(normal_matrix(3, 3, rng));
    sum += pbt_level_loss<double>(f.back(), m.back()).value;
  }
  const auto t = pbt_total<double>(f, m);
  CHECK(t.value == doctest::Approx(sum).epsilon(1e-14));
  CHECK(pbt_total<double>({f[0]}, {m[0]}).value == pbt_level_loss<double>(f[0], m[0]).value);

  // Orthonormal rows on both sides give C = I at every level.
  const std::vector<MatrixXd> eye(4, MatrixXd::Identity(3, 3));
  CHECK(pbt_total<double>(eye, eye).value == 0.0);

  // Hand level values 0.5, 0.25, 0, 1: rows at a chosen angle give C_ii = cos.
  std::vector<MatrixXd> hf, hm;
  for (double target : {0.5, 0.25, 0.0, 1.0}) {
    const double cosv = 1.0 - std::sqrt(target);  // (1 - C_11)^2 = target
    MatrixXd a(1, 2), b(1, 2);
    a << 1, 0;
    b << cosv, std::sqrt(1 - cosv * cosv);
    hf.push_back(a);
    hm.push_back(b);
  }
  CHECK(pbt_total<double>(hf, hm).value == doctest::Approx(1.75).epsilon(1e-12));
}

TEST_CASE("overall loss is the sum of its terms") {
  EncoderConfig c;
  c.num_modalities = 2;
  c.dims = {4, 2, 1};
  c.patch = {2, 1, 1};
  c.depth = 2;
  c.embed_dim = 4;
  c.num_heads = 2;
  c.pyramid_levels = 2;
  const ModelParams p = init_params(c);
  Rng rng(5);
  MatrixXd x(4, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  BinaryMask m(2, 4);
  m.set(0, 1, MaskPhase::patch);
  const auto o = dual_forward<double>(x, m, p, c, nullptr, true);
  const auto on = overall_loss<double>(o, x, m, 2, true, 1.0, nullptr);
  CHECK(std::abs(on.l_overall - (on.l_mim + on.l_pbt_total)) < 1e-12);
  CHECK(on.pbt_per_level.size() == 2);
  const auto off = overall_loss<double>(o, x, m, 2, false, 1.0, nullptr);
  CHECK(off.l_pbt_total == 0.0);
  CHECK(off.l_overall == off.l_mim);
}
