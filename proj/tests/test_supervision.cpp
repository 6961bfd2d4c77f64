#include <doctest.h>

#include <random>

#include "support/gradcheck.hpp"
#include "t2icount/supervision.hpp"

using namespace t2i;

namespace {

Grid<Real> uniform_grid(int h, int w, std::mt19937_64& rng, double lo = 0, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Grid<Real> g(1, h, w);
  for (Eigen::Index j = 0; j < g.pixels(); ++j) g.data(0, j) = u(rng);
  return g;
}

PnaMap random_pna(int h, int w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(-1, 1);
  PnaMap p;
  p.height = h;
  p.width = w;
  p.labels.resize(static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index j = 0; j < p.labels.size(); ++j) p.labels(j) = pick(rng);
  return p;
}

}  // namespace

TEST_CASE("min-max normalization") {
  std::mt19937_64 rng(1);
  const auto g = uniform_grid(5, 6, rng, -3, 7);
  const auto n = min_max_normalize(g);
  CHECK(n.data.minCoeff() == 0.0);
  CHECK(n.data.maxCoeff() == 1.0);
  Grid<Real> c(1, 4, 4);
  c.data.setConstant(0.7);
  CHECK(min_max_normalize(c).data.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention fusion stays in [0, 1] and reduces to normalization for one map") {
  std::mt19937_64 rng(2);
  const std::vector<Real> w{0.6, 0.3, 0.1};
  for (int k = 0; k < 50; ++k) {
    std::vector<Grid<Real>> maps{uniform_grid(4, 4, rng, -2, 2), uniform_grid(8, 8, rng), uniform_grid(16, 16, rng, 0, 5)};
    const auto f = fuse_attention(maps, w, 16, 16);
    CHECK(f.data.minCoeff() >= 0.0);
    CHECK(f.data.maxCoeff() <= 1.0 + 1e-12);
  }
  const auto single = uniform_grid(8, 8, rng);
  CHECK(fuse_attention<Real>({single}, {1.0}, 8, 8).data == min_max_normalize(single).data);
  CHECK_THROWS_AS(fuse_attention<Real>({single}, {0.5, 0.5}, 8, 8), InputError);
}

TEST_CASE("PNA labels follow density-first priority") {
  Grid<Real> d(1, 1, 4), a(1, 1, 4);
  d.data << 0.5, 0.5, 0.01, 0.01;
  a.data << 0.1, 0.9, 0.1, 0.9;
  const auto p = pna_map<Real>(d, a, 0.2, 0.3);
  CHECK(p.labels(0) == PnaMap::kPositive);
  CHECK(p.labels(1) == PnaMap::kPositive);
  CHECK(p.labels(2) == PnaMap::kNegative);
  CHECK(p.labels(3) == PnaMap::kAmbiguous);
  // boundaries are inclusive on both tests
  const auto q = pna_map<Real>(d, a, 0.5, 0.1);
  CHECK(q.labels(0) == PnaMap::kPositive);
  CHECK(q.labels(2) == PnaMap::kNegative);
  CHECK_THROWS_AS(pna_map<Real>(d, Grid<Real>(1, 2, 2), 0.2, 0.3), DimensionError);
}

TEST_CASE("RRC loss value on a hand example") {
  PnaMap p;
  p.height = 1;
  p.width = 4;
  p.labels.resize(4);
  p.labels << 1, 0, 0, -1;
  RowVec<Real> s(4);
  s << 0.25, 0.5, -0.4, 0.9;
  // 2 * (1 - 0.25) + 0.5 + 0
  CHECK(rrc_loss_value<Real>(s, p, 2.0) == doctest::Approx(2.0));
}

TEST_CASE("RRC autodiff gradient matches finite differences") {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 10; ++k) {
    const auto p = random_pna(6, 6, rng);
    auto s = uniform_grid(6, 6, rng, -1, 1);
    for (Eigen::Index j = 0; j < s.pixels(); ++j)
      if (std::abs(s.data(0, j)) < 1e-2) s.data(0, j) = 0.5;
    const auto r = testing::gradcheck([&](const auto& in) { return rrc_loss<Real>(in[0], p, 1.7); }, {s}, 1e-5);
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_CASE("regression loss value and gradient") {
  std::mt19937_64 rng(4);
  const auto gt = uniform_grid(5, 5, rng);
  const auto pred = uniform_grid(5, 5, rng, 0, 2);
  MseCountLoss loss;
  CHECK(loss(ad::Var<Real>::from_grid(pred), gt).item() == doctest::Approx(mse_count_value(pred, gt)).epsilon(1e-14));
  // oracle
  double mse = 0;
  for (Eigen::Index j = 0; j < 25; ++j) mse += std::pow(pred.data(0, j) - gt.data(0, j), 2) / 25;
  CHECK(mse_count_value(pred, gt) == doctest::Approx(mse + std::abs(pred.sum() - gt.sum()) / (gt.sum() + 1)));
  const auto r = testing::gradcheck([&](const auto& in) { return loss(in[0], gt); }, {pred});
  CHECK(r.max_rel_error < 1e-6);

  auto negative = gt;
  negative(0, 2, 2) = -0.1;
  CHECK_THROWS_AS(loss(ad::Var<Real>::from_grid(pred), negative), InputError);
  CHECK_THROWS_AS(make_regression_loss("huber"), ConfigError);
}

TEST_CASE("summed squared error regression loss") {
  std::mt19937_64 rng(41);
  const auto gt = uniform_grid(6, 4, rng, 0, 0.3);
  const auto pred = uniform_grid(6, 4, rng, 0, 0.5);
  SseCountLoss loss;
  CHECK(loss.name() == "sse_count");
  double sse = 0;
  for (Eigen::Index j = 0; j < 24; ++j) sse += std::pow(pred.data(0, j) - gt.data(0, j), 2);
  const double expected = sse + std::abs(pred.sum() - gt.sum()) / (gt.sum() + 1);
  CHECK(sse_count_value(pred, gt) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(loss(ad::Var<Real>::from_grid(pred), gt).item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(sse_count_value(gt, gt) == 0.0);
  const auto r = testing::gradcheck([&](const auto& in) { return loss(in[0], gt); }, {pred});
  CHECK(r.max_rel_error < 1e-6);
  CHECK(make_regression_loss("sse_count")->name() == "sse_count");
  CHECK_THROWS_AS(loss(ad::Var<Real>::from_grid(uniform_grid(4, 6, rng)), gt), DimensionError);
}

TEST_CASE("total loss combines regression and RRC") {
  std::mt19937_64 rng(5);
  const auto gt = uniform_grid(16, 16, rng, 0, 0.05);
  const auto pred = ad::Var<Real>::from_grid(uniform_grid(16, 16, rng), true);
  CrossAttentionStack stack;
  for (int h : {4, 8, 16}) stack.maps.push_back({h, uniform_grid(h, h, rng)});
  std::vector<SimilarityMap> sims{{ad::Var<Real>::from_grid(uniform_grid(4, 4, rng, -1, 1), true), 3},
                                  {ad::Var<Real>::from_grid(uniform_grid(8, 8, rng, -1, 1), true), 2}};
  LossWeights w;
  w.tau = 0.03;
  MseCountLoss reg;

  const auto full = total_loss(pred, gt, sims, stack, w, default_fusion_weights(), reg);
  REQUIRE(full.parts.rrc.size() == 2);
  CHECK(full.parts.rrc[0].first == 3);
  CHECK(full.parts.total == doctest::Approx(full.parts.regression + w.gamma * full.parts.rrc_sum()).epsilon(1e-14));
  CHECK(full.parts.positives + full.parts.negatives + full.parts.ambiguous == 256);
  ad::backward(full.value);
  CHECK(sims[0].values.has_grad());
  CHECK(pred.has_grad());

  w.gamma = 0;
  const auto plain = total_loss(pred, gt, sims, stack, w, default_fusion_weights(), reg);
  CHECK(plain.parts.total == reg(pred, gt).item());
  CHECK(plain.parts.rrc.size() == 2);
}

TEST_CASE("default tau is the Gaussian density one sigma out at latent scale") {
  const double s = 4.0 / 8.0;
  CHECK(default_tau(4.0) == doctest::Approx(std::exp(-0.5) / (2 * M_PI * s * s)));
  LossWeights w;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w.tau = default_tau(4.0);
  CHECK_NOTHROW(w.validate());
  w.theta = 1.5;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}
