#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ctreg/losses.hpp"
#include "support.hpp"

using namespace ctreg;

namespace {

SimilarityMatrix<double> from_matrices(const Mat<double>& s, const Mat<double>& c) {
  SimilarityMatrix<double> m;
  m.s = s;
  m.c = c;
  return m;
}

struct RandomCase {
  std::vector<std::vector<double>> emb;
  std::vector<double> heights;
  AnchorSet<double> anchors;
};

RandomCase random_case(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> h(0, 30);
  RandomCase rc;
  rc.anchors.embeddings.resize(n, d);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(d);
    for (auto& v : row) v = nd(rng);
    rc.emb.push_back(row);
    double norm = 0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    for (int k = 0; k < d; ++k) rc.anchors.embeddings(i, k) = row[k] / norm;
    rc.anchors.norms.push_back(norm);
    rc.heights.push_back(h(rng));
    rc.anchors.positions.push_back({0, 0, i});
  }
  rc.anchors.heights = rc.heights;
  return rc;
}

}  // namespace

TEST(CtrlLoss, TwoNegativeCaseIsLogTwo) {
  // Anchor 0 sees one similar (s = +a) and one dissimilar (s = -a) negative
  // at equal cosine.
  const double a = 20.0;
  Mat<double> s(3, 3), c(3, 3);
  s << 0, a, -a, a, 0, a, -a, a, 0;
  c << 1, 0.3, 0.3, 0.3, 1, 0.1, 0.3, 0.1, 1;
  const auto r = ctrl_loss_and_grad(from_matrices(s, c), LossConfig{});
  EXPECT_NEAR(r.per_anchor(0), std::log(2.0), 1e-9);
}

TEST(CtrlLoss, TwoNegativeCaseFromHeights) {
  // s = -log(d^2 / 2): d^2 = 2 e^-a gives +a, d^2 = 2 e^a gives -a.
  const double a = 3.0;
  AnchorSet<double> anchors;
  anchors.heights = {10.0, 10.0 + std::sqrt(2 * std::exp(-a)), 10.0 - std::sqrt(2 * std::exp(a))};
  anchors.embeddings.resize(3, 2);
  anchors.embeddings << 1, 0, 0, 1, 0, -1;  // c_01 = c_02 = 0
  anchors.positions = {{0, 0, 0}, {0, 0, 1}, {0, 0, 2}};
  const auto sim = build_similarity(anchors, 1.0, 1e-6);
  const auto r = ctrl_loss_and_grad(sim, LossConfig{});
  EXPECT_NEAR(r.per_anchor(0), std::log(2.0), 1e-8);
}

TEST(CtrlLoss, AllPositiveSimilaritiesGiveZero) {
  AnchorSet<double> anchors;
  anchors.heights = {10.0, 10.1, 10.2, 10.3};  // all pairs within sqrt(2) m -> s > 0
  anchors.embeddings = Mat<double>::Random(4, 5);
  anchors.embeddings.rowwise().normalize();
  anchors.positions.resize(4);
  const auto sim = build_similarity(anchors, 1.0);
  EXPECT_GT(sim.s.minCoeff(), 0.0);
  EXPECT_NEAR(ctrl_loss(sim, LossConfig{}), 0.0, 1e-9);
}

TEST(CtrlLoss, MatchesTripleLoopOracle) {
  const LossConfig cfg;
  for (int t = 0; t < 100; ++t) {
    const auto rc = random_case(16, 8, 100 + t);
    const auto sim = build_similarity(rc.anchors, cfg.sigma, cfg.eps_sim);
    const double loop = ctreg::testing::ctrl_loss_loop(rc.emb, rc.heights, cfg.tau, cfg.sigma, cfg.eps_sim, cfg.eps_log);
    EXPECT_NEAR(ctrl_loss(sim, cfg), loop, 1e-6);
  }
}

TEST(CtrlLoss, NonNegativeAndPermutationInvariant) {
  const LossConfig cfg;
  for (int t = 0; t < 20; ++t) {
    auto rc = random_case(12, 4, 500 + t);
    const double l = ctrl_loss(build_similarity(rc.anchors, 1.0), cfg);
    EXPECT_GE(l, 0.0);
    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(t);
    std::shuffle(perm.begin(), perm.end(), rng);
    AnchorSet<double> b = rc.anchors;
    for (int i = 0; i < 12; ++i) {
      b.embeddings.row(i) = rc.anchors.embeddings.row(perm[i]);
      b.heights[i] = rc.anchors.heights[perm[i]];
    }
    EXPECT_NEAR(ctrl_loss(build_similarity(b, 1.0), cfg), l, 1e-12);
  }
}

TEST(CtrlLoss, PullingSimilarPartnerCloserLowersLoss) {
  Mat<double> s(3, 3);
  s << 0, 2, -1, 2, 0, 1, -1, 1, 0;
  double prev = 1e300;
  for (double c01 = -0.9; c01 <= 0.9; c01 += 0.1) {
    Mat<double> c(3, 3);
    c << 1, c01, 0.2, c01, 1, 0.0, 0.2, 0.0, 1;
    const double l = ctrl_loss(from_matrices(s, c), LossConfig{});
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(CtrlLoss, EmbeddingGradientMatchesFiniteDifferences) {
  const LossConfig cfg;
  for (int t = 0; t < 5; ++t) {
    auto rc = random_case(10, 6, 900 + t);
    // Raw (unnormalized) embeddings go through gather-style normalization.
    Mat<double> raw(10, 6);
    for (int i = 0; i < 10; ++i)
      for (int k = 0; k < 6; ++k) raw(i, k) = rc.emb[i][k];
    auto loss_of_raw = [&] {
      AnchorSet<double> a = rc.anchors;
      for (int i = 0; i < 10; ++i) {
        a.norms[i] = raw.row(i).norm();
        a.embeddings.row(i) = raw.row(i) / a.norms[i];
      }
      return ctrl_loss(build_similarity(a, cfg.sigma, cfg.eps_sim), cfg);
    };
    const auto r = ctrl_loss_and_grad(build_similarity(rc.anchors, cfg.sigma, cfg.eps_sim), cfg);
    const Mat<double> du = ctrl_unit_gradient(rc.anchors, r.d_cos);
    for (int i = 0; i < 10; ++i) {
      const auto u = rc.anchors.embeddings.row(i);
      const auto g = du.row(i);
      for (int k = 0; k < 6; ++k) {
        const double analytic = (g(k) - u(k) * u.dot(g)) / rc.anchors.norms[i];
        const double num = ctreg::testing::central_difference(loss_of_raw, &raw(i, k), 1e-4);
        EXPECT_LT(ctreg::testing::relative_error(analytic, num, 1e-7), 1e-4) << i << "," << k;
      }
    }
  }
}

TEST(CtrlLoss, NeedsTwoAnchors) {
  Mat<double> one = Mat<double>::Ones(1, 1);
  EXPECT_THROW(ctrl_loss(from_matrices(one, one), LossConfig{}), InsufficientAnchorsError);
}

namespace {

std::vector<PatchSample> cpr_batch() {
  auto b = ctreg::testing::make_patches(2, 4, 1, 11, 0.5, 3);
  return b;
}

Tensor<double> as_prediction(const std::vector<PatchSample>& b, double offset) {
  Tensor<double> p(static_cast<int>(b.size()), 1, 4, 4);
  for (std::size_t n = 0; n < b.size(); ++n)
    for (int i = 0; i < 16; ++i) p.sample(static_cast<int>(n))[i] = b[n].reference[i] + offset;
  return p;
}

}  // namespace

TEST(CprLoss, PerfectAgreementIsZero) {
  const auto b = cpr_batch();
  const auto t = DenseTargets::from_patches(b);
  const auto p = as_prediction(b, 0.0);
  const auto c = cpr_loss(p, p, t);
  EXPECT_EQ(c.l1, 0.0);
  EXPECT_EQ(c.l2, 0.0);
  EXPECT_EQ(c.l_c, 0.0);
}

TEST(CprLoss, UnitOffsetCase) {
  const auto b = cpr_batch();
  const auto t = DenseTargets::from_patches(b);
  const auto c = cpr_loss(as_prediction(b, 1.0), as_prediction(b, 0.0), t);
  EXPECT_DOUBLE_EQ(c.l1, 1.0);
  EXPECT_DOUBLE_EQ(c.l2, 0.0);
  EXPECT_DOUBLE_EQ(c.l_c, 1.0);
  EXPECT_DOUBLE_EQ(c.combined(1.0), 2.0);
}

TEST(CprLoss, NonForestPixelsIgnoredAndConsistencySymmetric) {
  const auto b = cpr_batch();
  const auto t = DenseTargets::from_patches(b);
  auto p1 = as_prediction(b, 0.5), p2 = as_prediction(b, -0.25);
  const auto base = cpr_loss(p1, p2, t);
  for (std::size_t n = 0; n < b.size(); ++n)
    for (int i = 0; i < 16; ++i)
      if (!b[n].forest_mask[i]) {
        p1.sample(static_cast<int>(n))[i] = 1e6;
        p2.sample(static_cast<int>(n))[i] = -1e6;
      }
  const auto moved = cpr_loss(p1, p2, t);
  EXPECT_EQ(moved.l1, base.l1);
  EXPECT_EQ(moved.l2, base.l2);
  EXPECT_EQ(moved.l_c, base.l_c);
  EXPECT_EQ(cpr_loss(p2, p1, t).l_c, moved.l_c);
}

TEST(CprLoss, MatchesScalarLoops) {
  const auto b = cpr_batch();
  const auto t = DenseTargets::from_patches(b);
  Tensor<double> p1(2, 1, 4, 4), p2(2, 1, 4, 4);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(15, 5);
  for (auto& v : p1.values()) v = nd(rng);
  for (auto& v : p2.values()) v = nd(rng);
  double s1 = 0, s2 = 0, sc = 0;
  int nl = 0, nf = 0;
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 16; ++i) {
      if (!b[n].forest_mask[i]) continue;
      const double a = p1.sample(n)[i], c = p2.sample(n)[i];
      sc += (a - c) * (a - c);
      ++nf;
      if (!b[n].labeled) continue;
      s1 += (a - b[n].reference[i]) * (a - b[n].reference[i]);
      s2 += (c - b[n].reference[i]) * (c - b[n].reference[i]);
      ++nl;
    }
  const auto c = cpr_loss(p1, p2, t);
  EXPECT_NEAR(c.l1, s1 / nl, 1e-12);
  EXPECT_NEAR(c.l2, s2 / nl, 1e-12);
  EXPECT_NEAR(c.l_c, sc / nf, 1e-12);
}

TEST(CprLoss, PureUnlabeledBatchIsFlagged) {
  auto b = cpr_batch();
  for (auto& p : b) p.labeled = false;
  const auto t = DenseTargets::from_patches(b);
  const auto c = cpr_loss(as_prediction(b, 1.0), as_prediction(b, 0.0), t);
  EXPECT_TRUE(c.pure_unlabeled);
  EXPECT_EQ(c.l1, 0.0);
  EXPECT_EQ(c.l2, 0.0);
  EXPECT_DOUBLE_EQ(c.l_c, 1.0);
}

TEST(CprLoss, ShapeMismatchIsContractError) {
  const auto b = cpr_batch();
  const auto t = DenseTargets::from_patches(b);
  EXPECT_THROW(cpr_loss(Tensor<double>(2, 1, 4, 4), Tensor<double>(1, 1, 4, 4), t), ContractError);
}

TEST(CprLoss, GradientsMatchFiniteDifferences) {
  const auto b = cpr_batch();
  const auto t = DenseTargets::from_patches(b);
  Tensor<double> p1 = as_prediction(b, 0.3), p2 = as_prediction(b, -0.7);
  p1.sample(0)[5] += 2.0;
  Tensor<double> g1(2, 1, 4, 4), g2(2, 1, 4, 4);
  supervised_mse(p1, t, &g1);
  supervised_mse(p2, t, &g2);
  consistency_mse(p1, p2, t, &g1, &g2, 1.0);
  auto f = [&] { return cpr_loss(p1, p2, t).combined(1.0); };
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_NEAR(g1.data()[i], ctreg::testing::central_difference(f, &p1.data()[i], 1e-5), 1e-8);
    EXPECT_NEAR(g2.data()[i], ctreg::testing::central_difference(f, &p2.data()[i], 1e-5), 1e-8);
  }
}

TEST(HybridLoss, HandEvaluatedTotal) {
  CprTerms c;
  c.l1 = 1;
  c.l2 = 0;
  c.l_c = 1;
  const std::vector<double> w{2.0};
  const auto r = hybrid_loss<double>(c, 0.5, w, LossConfig{});
  EXPECT_NEAR(r.total, 32.0004, 1e-12);
  EXPECT_DOUBLE_EQ(r.l_wd, 4.0);
}

TEST(HybridLoss, ZeroCaseAndAblation) {
  const std::vector<double> zeros(5, 0.0);
  EXPECT_EQ(hybrid_loss<double>(CprTerms{}, 0.0, zeros, LossConfig{}).total, 0.0);
  CprTerms c;
  c.l1 = 0.7;
  c.l2 = 1.1;
  c.l_c = 0.4;
  LossConfig cfg;
  cfg.lambda_ctrl = 0;
  cfg.lambda_w = 0;
  const std::vector<double> w{1.0, -3.0};
  EXPECT_DOUBLE_EQ(hybrid_loss<double>(c, 9.0, w, cfg).total, c.combined(cfg.lambda_c));
}

TEST(HybridLoss, EmptyWeightsIsContractError) {
  EXPECT_THROW(hybrid_loss<double>(CprTerms{}, 0.0, std::span<const double>(), LossConfig{}), ContractError);
}

TEST(LossConfig, RejectsInvalidValues) {
  LossConfig c;
  c.tau = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.lambda_w = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.eps_log = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
