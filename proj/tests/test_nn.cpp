#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "emim/losses.hpp"
#include "emim/nn.hpp"
#include "emim/rng.hpp"
#include "fixtures.hpp"

using namespace emim;
using Eigen::MatrixXd;

namespace {

EncoderConfig tiny(std::size_t depth = 2) {
  EncoderConfig c;
  c.num_modalities = 2;
  c.dims = {4, 2, 1};
  c.patch = {2, 1, 1};
  c.depth = depth;
  c.embed_dim = 4;
  c.num_heads = 2;
  c.pyramid_levels = depth == 0 ? 1 : depth;
  c.seed = 3;
  return c;
}

void jitter(ModelParams& p, std::uint64_t seed, double scale) {
  Rng r(seed);
  p.visit([&](const std::string&, MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += scale * r.normal();
  });
}

MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& r) {
  MatrixXd x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = r.uniform();
  return x;
}

std::vector<MatrixXd*> tensors(ModelParams& p) {
  std::vector<MatrixXd*> out;
  p.visit([&](const std::string&, MatrixXd& m) { out.push_back(&m); });
  return out;
}

std::vector<std::string> names(const ModelParams& p) {
  std::vector<std::string> out;
  p.visit([&](const std::string& n, const MatrixXd&) { out.push_back(n); });
  return out;
}

// Below the floor the central difference is roundoff-limited.
double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-5}); }

}  // namespace

TEST_CASE("tap layers") {
  EncoderConfig c;
  c.depth = 8;
  c.pyramid_levels = 4;
  CHECK(c.tap_layers() == std::vector<std::size_t>{2, 4, 6, 8});
  c.depth = 0;
  c.pyramid_levels = 1;
  CHECK(c.tap_layers() == std::vector<std::size_t>{0});
  c.depth = 6;
  c.pyramid_levels = 4;
  CHECK_THROWS(validate(c));
}

TEST_CASE("patch embedding") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 1, 0.1);
  const std::size_t n = c.num_positions(), P = c.patch_values();

  ModelParams zb = p;
  zb.embed_b.setZero();
  CHECK(patch_embed<double>(MatrixXd::Zero(n, P), zb).isApprox(zb.pos, 1e-15));

  Rng r(2);
  MatrixXd x = random_matrix(n, P, r);
  x.row(2) = x.row(0);
  const MatrixXd t = patch_embed<double>(x, p);
  CHECK((t.row(2) - t.row(0)).isApprox(p.pos.row(2) - p.pos.row(0), 1e-12));

  // Direct arithmetic oracle, d = 3, two patches of two values.
  ModelParams h;
  h.embed_w = MatrixXd(3, 2);
  h.embed_w << 1, 2, 0, -1, 0.5, 0.5;
  h.embed_b = MatrixXd(1, 3);
  h.embed_b << 0.1, 0.2, 0.3;
  h.pos = MatrixXd(2, 3);
  h.pos << 1, 0, 0, 0, 1, 0;
  MatrixXd q(2, 2);
  q << 1, 1, 2, -1;
  MatrixXd want(2, 3);
  want << 1 + 2 + 0.1 + 1, -1 + 0.2, 1 + 0.3, 2 - 2 + 0.1, 1 + 0.2 + 1, 0.5 + 0.3;
  CHECK(patch_embed<double>(q, h).isApprox(want, 1e-15));
}

TEST_CASE("encoder: depth 0 returns embedded tokens") {
  const EncoderConfig c = tiny(0);
  const ModelParams p = init_params(c);
  Rng r(3);
  const MatrixXd x = random_matrix(c.num_positions(), c.patch_values(), r);
  const MatrixXd t = patch_embed<double>(x, p);
  const auto taps = encoder_forward<double>(t, p, c.tap_layers(), c.num_heads, nullptr);
  REQUIRE(taps.size() == 1);
  CHECK(taps[0] == t);
}

TEST_CASE("encoder: permutation equivariance") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 4, 0.2);
  Rng r(5);
  const MatrixXd x = random_matrix(c.num_positions(), c.patch_values(), r);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(c.num_positions());
  perm.indices() << 2, 0, 3, 1;
  ModelParams pp = p;
  pp.pos = perm * p.pos;
  const auto a = encoder_forward<double>(patch_embed<double>(x, p), p, c.tap_layers(), c.num_heads, nullptr);
  const MatrixXd px = perm * x;
  const auto b = encoder_forward<double>(patch_embed<double>(px, pp), pp, c.tap_layers(), c.num_heads, nullptr);
  for (std::size_t l = 0; l < a.size(); ++l) CHECK((perm * a[l]).isApprox(b[l], 1e-12));
}

namespace {

using Row = std::vector<double>;

Row ln(const Row& x, const MatrixXd& g, const MatrixXd& b) {
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v / x.size();
  for (double v : x) var += (v - mean) * (v - mean) / x.size();
  Row out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g(0, i) + b(0, i);
  return out;
}

Row affine(const MatrixXd& w, const Row& x, const MatrixXd* b) {
  Row out(w.rows(), 0.0);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) out[i] += w(i, j) * x[j];
    if (b) out[i] += (*b)(0, i);
  }
  return out;
}

double gelu_ref(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("encoder: single block, single head, d=2, n=2 scripted oracle") {
  EncoderConfig c;
  c.num_modalities = 1;
  c.dims = {2, 1, 1};
  c.patch = {1, 1, 1};
  c.depth = 1;
  c.embed_dim = 2;
  c.num_heads = 1;
  c.pyramid_levels = 1;
  ModelParams p = init_params(c);
  jitter(p, 6, 0.3);
  const auto& b = p.blocks[0];
  MatrixXd tokens(2, 2);
  tokens << 0.3, -0.7, 1.1, 0.4;
  const auto got = encoder_forward<double>(tokens, p, {1}, 1, nullptr);

  std::vector<Row> x{{0.3, -0.7}, {1.1, 0.4}}, u(2), q(2), k(2), v(2);
  for (int i = 0; i < 2; ++i) {
    u[i] = ln(x[i], b.ln1_g, b.ln1_b);
    q[i] = affine(b.wq, u[i], &b.bq);
    k[i] = affine(b.wk, u[i], nullptr);
    v[i] = affine(b.wv, u[i], &b.bv);
  }
  for (int i = 0; i < 2; ++i) {
    double s[2], z = 0.0;
    for (int j = 0; j < 2; ++j) s[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / std::sqrt(2.0);
    const double mx = std::max(s[0], s[1]);
    for (double& e : s) z += (e = std::exp(e - mx));
    Row a{0.0, 0.0};
    for (int j = 0; j < 2; ++j)
      for (int t = 0; t < 2; ++t) a[t] += s[j] / z * v[j][t];
    Row x1 = affine(b.wo, a, &b.bo);
    for (int t = 0; t < 2; ++t) x1[t] += x[i][t];
    Row h = affine(b.w1, ln(x1, b.ln2_g, b.ln2_b), &b.b1);
    for (double& e : h) e = gelu_ref(e);
    const Row m = affine(b.w2, h, &b.b2);
    for (int t = 0; t < 2; ++t) CHECK(got[0](i, t) == doctest::Approx(x1[t] + m[t]).epsilon(1e-12));
  }
}

TEST_CASE("dual forward: branch relations and shapes") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 7, 0.1);
  const auto vol = fixture::uniform_volumes(1, c.num_modalities, c.dims, 8).front();
  const std::size_t n = c.num_positions();

  const DualResult empty = dual_forward(vol, BinaryMask(c.num_modalities, n), p, c);
  for (std::size_t l = 0; l < empty.full.size(); ++l) CHECK(empty.full[l].matrix == empty.masked[l].matrix);

  BinaryMask m(c.num_modalities, n);
  m.set(1, 2, MaskPhase::patch);
  m.set(0, 0, MaskPhase::patch);
  const DualResult masked = dual_forward(vol, m, p, c);
  for (std::size_t l = 0; l < masked.full.size(); ++l) CHECK(masked.full[l].matrix == empty.full[l].matrix);
  CHECK(masked.reconstruction_volume().size() == vol.size());
  CHECK(masked.full.back().source == FeatureSource::full_input);
  CHECK(masked.masked.back().source == FeatureSource::masked_input);
}

TEST_CASE("backward: zero output gradient gives zero gradients") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 9, 0.2);
  Rng r(10);
  const MatrixXd x = random_matrix(c.num_positions(), c.patch_values(), r);
  BinaryMask m(2, c.num_positions());
  m.set(0, 1, MaskPhase::patch);
  DualCache<double> cache;
  dual_forward<double>(x, m, p, c, &cache, true);
  DualGrad<double> g;
  g.reconstruction = MatrixXd::Zero(x.rows(), x.cols());
  const ModelParams G = backward<double>(cache, g, p, c);
  G.visit([](const std::string& name, const MatrixXd& t) {
    INFO(name);
    CHECK(t.isZero(0.0));
  });
}

TEST_CASE("backward: shared weights sum the branch gradients") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 11, 0.3);
  Rng r(12);
  const std::size_t n = c.num_positions();
  const MatrixXd x = random_matrix(n, c.patch_values(), r);
  BinaryMask m(2, n);
  m.set(0, 1, MaskPhase::patch);
  m.set(1, 3, MaskPhase::patch);

  // Random linear functional on every output.
  DualGrad<double> seed;
  for (std::size_t l = 0; l < c.tap_layers().size(); ++l) {
    seed.full.push_back(random_matrix(n, c.embed_dim, r).array() - 0.5);
    seed.masked.push_back(random_matrix(n, c.embed_dim, r).array() - 0.5);
  }
  seed.reconstruction = random_matrix(n, c.patch_values(), r).array() - 0.5;
  auto value = [&](const ModelParams& pf, const ModelParams& pm) {
    const auto of = dual_forward<double>(x, m, pf, c, nullptr, true);
    const auto om = dual_forward<double>(x, m, pm, c, nullptr, true);
    double s = (om.reconstruction.array() * seed.reconstruction.array()).sum();
    for (std::size_t l = 0; l < of.full.size(); ++l) {
      s += (of.full[l].array() * seed.full[l].array()).sum();
      s += (om.masked[l].array() * seed.masked[l].array()).sum();
    }
    return s;
  };

  DualCache<double> cache;
  dual_forward<double>(x, m, p, c, &cache, true);
  ModelParams G = backward<double>(cache, seed, p, c);
  ModelParams pf = p, pm = p;
  auto tf = tensors(pf), tm = tensors(pm), tg = tensors(G);
  const auto nm = names(p);
  const double h = 1e-5;
  for (std::size_t t = 0; t < tf.size(); ++t) {
    for (Eigen::Index i = 0; i < tf[t]->size(); i += 3) {
      auto fd = [&](std::vector<MatrixXd*>& which) {
        double& v = which[t]->data()[i];
        const double s = v;
        v = s + h;
        const double a = value(pf, pm);
        v = s - h;
        const double b = value(pf, pm);
        v = s;
        return (a - b) / (2 * h);
      };
      const double total = fd(tf) + fd(tm);
      INFO(nm[t] << "[" << i << "]");
      CHECK(rel_err(tg[t]->data()[i], total) < 1e-4);
    }
  }
}

TEST_CASE("backward: every parameter matches finite differences through the full objective") {
  const EncoderConfig c = tiny();
  REQUIRE(c.num_positions() == 4);
  ModelParams p = init_params(c);
  jitter(p, 13, 0.3);
  Rng r(14);
  const std::size_t n = c.num_positions();
  const MatrixXd x = random_matrix(n, c.patch_values(), r);
  BinaryMask m(2, n);
  m.set(0, 1, MaskPhase::patch);
  m.set(1, 1, MaskPhase::patch);
  m.set(1, 2, MaskPhase::patch);
  const std::size_t V = c.patch.voxels();
  auto loss = [&](const ModelParams& q) {
    const auto o = dual_forward<double>(x, m, q, c, nullptr, true);
    return overall_loss<double>(o, x, m, V, true, 1.0, nullptr).l_overall;
  };
  DualCache<double> cache;
  const auto o = dual_forward<double>(x, m, p, c, &cache, true);
  DualGrad<double> g;
  overall_loss<double>(o, x, m, V, true, 1.0, &g);
  ModelParams G = backward<double>(cache, g, p, c);
  auto tp = tensors(p), tg = tensors(G);
  const auto nm = names(p);
  for (std::size_t t = 0; t < tp.size(); ++t) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < tp[t]->size(); ++i) {
      double& v = tp[t]->data()[i];
      const double s = v;
      v = s + 1e-5;
      const double a = loss(p);
      v = s - 1e-5;
      const double b = loss(p);
      v = s;
      worst = std::max(worst, rel_err(tg[t]->data()[i], (a - b) / 2e-5));
    }
    INFO(nm[t]);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("float path tracks double") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 15, 0.1);
  Rng r(16);
  const MatrixXd x = random_matrix(c.num_positions(), c.patch_values(), r);
  BinaryMask m(2, c.num_positions());
  m.set(0, 0, MaskPhase::patch);
  const auto od = dual_forward<double>(x, m, p, c, nullptr, true);
  const auto of = dual_forward<float>(x.cast<float>(), m, p.cast<float>(), c, nullptr, true);
  CHECK((od.reconstruction - of.reconstruction.cast<double>()).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("checkpoint round trip and validation") {
  const EncoderConfig c = tiny();
  ModelParams p = init_params(c);
  jitter(p, 17, 0.1);
  const auto bytes = encode_checkpoint(c, p);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.config.embed_dim == c.embed_dim);
  CHECK(back.config.dims == c.dims);
  CHECK(encode_checkpoint(back.config, back.params) == bytes);

  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(cut), CheckpointError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), CheckpointError);
  ModelParams wrong = p;
  wrong.pos = MatrixXd::Zero(3, 4);
  CHECK_THROWS_AS(check_shapes(wrong, c), CheckpointError);

  const auto path = std::filesystem::temp_directory_path() / "emim_test.ckpt";
  save_checkpoint(path, c, p);
  CHECK(encode_checkpoint(load_checkpoint(path).config, load_checkpoint(path).params) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("init is seed-deterministic") {
  EncoderConfig c = tiny();
  CHECK(encode_checkpoint(c, init_params(c)) == encode_checkpoint(c, init_params(c)));
  EncoderConfig d = c;
  d.seed = 4;
  CHECK(init_params(c).pos != init_params(d).pos);
}
