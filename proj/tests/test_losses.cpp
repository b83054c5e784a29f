#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "n2p/config.hpp"
#include "n2p/losses.hpp"
#include "support.hpp"

using namespace n2p;
using M = Matrix<double>;
using V = Eigen::VectorXd;

namespace {

V vec(std::initializer_list<double> v) {
  V out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

M unit_rows(n2p::Rng& rng, int n) {
  M m = test::random_matrix(rng, n, 3);
  for (int r = 0; r < n; ++r) m.row(r).normalize();
  return m;
}

}  // namespace

TEST(LossRgb, Values) {
  M a(1, 3), b = M::Zero(1, 3);
  a << 1, 0, 0;
  EXPECT_EQ(loss_rgb(b, b), 0.0);
  EXPECT_DOUBLE_EQ(loss_rgb(a, b), 1.0);
  M p(2, 3), g = M::Zero(2, 3);
  p << 1, 0, 0, 0, 0, 0;
  EXPECT_DOUBLE_EQ(loss_rgb(p, g), 0.5);
  EXPECT_THROW(loss_rgb(p, b), ShapeError);
}

TEST(MaxMin, Values) {
  const V a = maxmin_norm(vec({2, 4, 6}));
  EXPECT_NEAR(a(0), 0.0, 1e-12);
  EXPECT_NEAR(a(1), 0.5, 1e-8);
  EXPECT_NEAR(a(2), 1.0, 1e-8);
  EXPECT_EQ(maxmin_norm(vec({3, 3, 3})), V::Zero(3));
  const V c = maxmin_norm(vec({-1, 1}));
  EXPECT_NEAR(c(0), 0.0, 1e-12);
  EXPECT_NEAR(c(1), 1.0, 1e-8);
}

TEST(LossDepth, ValuesAndAffineInvariance) {
  EXPECT_NEAR(loss_depth(vec({1, 2}), vec({2, 1})), 1.0, 1e-7);
  n2p::Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    V gt(16), pred(16);
    for (int i = 0; i < 16; ++i) {
      gt(i) = rng.uniform(1, 30);
      pred(i) = rng.uniform(1, 30);
    }
    EXPECT_NEAR(loss_depth(gt, gt), 0.0, 1e-20);
    const double a = rng.uniform(0.1, 5), b = rng.uniform(0, 10);
    EXPECT_NEAR(loss_depth((a * gt.array() + b).matrix(), gt), 0.0, 1e-12);
    EXPECT_NEAR(loss_depth((a * pred.array() + b).matrix(), gt), loss_depth(pred, gt), 1e-9);
  }
  EXPECT_THROW(loss_depth(vec({1, 2}), vec({1})), ShapeError);
  EXPECT_THROW(loss_depth(vec({1, 2}), vec({0, 1})), ValueError);
}

TEST(LossNormal, HandValues) {
  M z(1, 3), nz(1, 3), x(1, 3), y(1, 3);
  z << 0, 0, 1;
  nz << 0, 0, -1;
  x << 1, 0, 0;
  y << 0, 1, 0;
  EXPECT_EQ(loss_normal(z, z), 0.0);
  EXPECT_DOUBLE_EQ(loss_normal(z, nz), 4.0);
  EXPECT_DOUBLE_EQ(loss_normal(x, y), 3.0);
  M two(2, 3), two_gt(2, 3);
  two << 0, 0, 1, 1, 0, 0;
  two_gt << 0, 0, -1, 0, 1, 0;
  EXPECT_DOUBLE_EQ(loss_normal(two, two_gt), 7.0);  // summed over rays
  M bad(1, 3);
  bad << 1, 1, 0;
  EXPECT_THROW(loss_normal(bad, z), ValueError);
  EXPECT_THROW(loss_normal(z, bad), ValueError);
}

TEST(MatchingCost, DefaultWeights) {
  const LossWeights w;
  const V ones = V::Ones(4);
  const V c = matching_cost(ones, ones, ones, w);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(c(i), 1.15, 1e-12);
  EXPECT_EQ(matching_cost(V::Zero(3), V::Zero(3), V::Zero(3), w), V::Zero(3));
  n2p::Rng rng(2);
  V d(5), r(5), n(5);
  for (int i = 0; i < 5; ++i) d(i) = rng.uniform(), r(i) = rng.uniform(), n(i) = rng.uniform();
  EXPECT_LT((matching_cost(3 * d, 3 * r, 3 * n, w) - 3 * matching_cost(d, r, n, w)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(matching_cost(V::Zero(2), V::Zero(3), V::Zero(3), w), ShapeError);
}

TEST(SelectHard, OrderTiesAndClipping) {
  const std::vector<int> px{10, 11, 12};
  const auto a = select_hard(vec({0.5, 0.9, 0.1}), 2, px, 8, 8, 3);
  EXPECT_EQ(a.indices(), (std::vector<int>{1, 0}));
  const auto b = select_hard(vec({0.2, 0.2, 0.2}), 2, px, 8, 8, 3);
  EXPECT_EQ(b.indices(), (std::vector<int>{0, 1}));
  const std::vector<int> corner{0};
  const auto c = select_hard(vec({1.0}), 1, corner, 8, 8, 3);
  EXPECT_EQ(c.samples[0].region.rows(), 2);
  EXPECT_EQ(c.samples[0].region.cols(), 2);
  const std::vector<int> far_corner{63};
  EXPECT_EQ(select_hard(vec({1.0}), 1, far_corner, 8, 8, 9).samples[0].region.size(), 25);
  EXPECT_EQ(select_hard(vec({1.0}), 1, std::vector<int>{27}, 8, 8, 1).samples[0].region.size(), 1);
}

TEST(SelectHard, ClampAndErrors) {
  const std::vector<int> px{1, 2};
  const auto s = select_hard(vec({0.3, 0.4}), 5, px, 4, 4, 3);
  EXPECT_EQ(s.size(), 2u);
  EXPECT_THROW(select_hard(vec({0.3, 0.4}), 0, px, 4, 4, 3), ValueError);
  EXPECT_THROW(select_hard(vec({0.3, 0.4}), 1, px, 4, 4, 4), ValueError);
  EXPECT_THROW(select_hard(vec({0.3}), 1, px, 4, 4, 3), ShapeError);
}

TEST(SelectHard, ScaleInvariantAndUnique) {
  n2p::Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    V c(40);
    std::vector<int> px(40);
    for (int i = 0; i < 40; ++i) {
      c(i) = std::floor(rng.uniform(0, 10));  // plenty of ties
      px[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(64));
    }
    const int n = 1 + static_cast<int>(rng.below(40));
    const auto a = select_hard(c, n, px, 8, 8, 9);
    const auto b = select_hard((c * rng.uniform(0.1, 100)).eval(), n, px, 8, 8, 9);
    EXPECT_EQ(a.indices(), b.indices());
    auto idx = a.indices();
    std::sort(idx.begin(), idx.end());
    EXPECT_EQ(std::unique(idx.begin(), idx.end()), idx.end());
    EXPECT_EQ(static_cast<int>(a.size()), n);
    // every selected cost >= every unselected cost
    std::vector<bool> chosen(40, false);
    for (int i : a.indices()) chosen[static_cast<std::size_t>(i)] = true;
    double lo = 1e9, hi = -1e9;
    for (int i = 0; i < 40; ++i) {
      if (chosen[static_cast<std::size_t>(i)])
        lo = std::min(lo, c(i));
      else
        hi = std::max(hi, c(i));
    }
    EXPECT_GE(lo, hi);
  }
}

TEST(Jsd, ValuesSymmetryBounds) {
  EXPECT_NEAR(jsd(vec({0.3, 0.7}), vec({0.3, 0.7})), 0.0, 1e-15);
  EXPECT_NEAR(jsd(vec({1, 0}), vec({0, 1})), std::numbers::ln2, 1e-15);
  const double direct = 0.5 * (0.5 * std::log(0.5 / 0.375) + 0.5 * std::log(0.5 / 0.625)) +
                        0.5 * (0.25 * std::log(0.25 / 0.375) + 0.75 * std::log(0.75 / 0.625));
  EXPECT_NEAR(jsd(vec({0.5, 0.5}), vec({0.25, 0.75})), direct, 1e-15);
  EXPECT_NEAR(direct, 0.0338220755686052, 1e-15);
  n2p::Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    V a(6), b(6);
    for (int i = 0; i < 6; ++i) a(i) = rng.uniform(-5, 5), b(i) = rng.uniform(-5, 5);
    const V p = softmax(a), q = softmax(b);
    const double pq = jsd(p, q), qp = jsd(q, p);
    EXPECT_NEAR(pq, qp, 1e-12);
    EXPECT_GE(pq, 0.0);
    EXPECT_LE(pq, std::numbers::ln2);
  }
  EXPECT_THROW(jsd(vec({0.5, 0.6}), vec({0.5, 0.5})), ValueError);
  EXPECT_THROW(jsd(vec({-0.5, 1.5}), vec({0.5, 0.5})), ValueError);
  EXPECT_THROW(jsd(vec({1}), vec({0.5, 0.5})), ShapeError);
}

TEST(Jsd, GraphMatchesScalarAndSaturatesThroughSoftmax) {
  M a(1, 2), b(1, 2);
  a << 20, -20;
  b << -20, 20;
  Graph<double> g;
  const Var t = graph_loss_tic(g, g.input(a), g.input(b));
  EXPECT_NEAR(g.scalar(t), std::numbers::ln2, 1e-12);
  n2p::Rng rng(5);
  const M fa = test::random_matrix(rng, 7, 5, -3, 3), fb = test::random_matrix(rng, 7, 5, -3, 3);
  Graph<double> h;
  const Var l = graph_loss_tic(h, h.input(fa), h.input(fb));
  double mean = 0;
  for (int r = 0; r < 7; ++r) mean += jsd(softmax(fa.row(r).transpose()), softmax(fb.row(r).transpose()));
  EXPECT_NEAR(h.scalar(l), mean / 7, 1e-12);
  Graph<double> z;
  EXPECT_NEAR(z.scalar(graph_loss_tic(z, z.input(fa), z.input(fa))), 0.0, 1e-15);
}

TEST(LossTotal, DefaultCoefficients) {
  const LossWeights w;
  EXPECT_NEAR(loss_total({1, 1, 1, 1, 1}, w), 1.125, 1e-12);
  EXPECT_EQ(loss_total({0, 0, 0, 0, 0}, w), 0.0);
  LossWeights off = w;
  off.beta = off.gamma = 0;
  const LossComponents c{0.3, 0.2, 5.0, 7.0, 0.4};
  EXPECT_EQ(loss_total(c, off), loss_rec(c, off));
  EXPECT_THROW(loss_total({std::nan(""), 0, 0, 0, 0}, w), NumericError);
}

TEST(LossWeightsKv, RoundTripAndValidation) {
  LossWeights w;
  w.sdc_rgb = 0.25;
  w.region = 5;
  KeyValues kv;
  w.write(kv);
  const auto back = LossWeights::read(KeyValues::parse(kv.str()));
  EXPECT_EQ(back.sdc_rgb, 0.25);
  EXPECT_EQ(back.region, 5);
  EXPECT_EQ(back.rec_normal, 0.005);
  kv.set("beta", -1.0);
  EXPECT_THROW(LossWeights::read(kv), ValueError);
  KeyValues even;
  even.set("region", 4);
  EXPECT_THROW(LossWeights::read(even), ValueError);
}

TEST(GraphLosses, MatchPlainVersions) {
  n2p::Rng rng(6);
  const int n = 12;
  const M pc = test::random_matrix(rng, n, 3, 0, 1), gc = test::random_matrix(rng, n, 3, 0, 1);
  M pd(n, 1), gd(n, 1);
  for (int i = 0; i < n; ++i) pd(i, 0) = rng.uniform(1, 20), gd(i, 0) = rng.uniform(1, 20);
  const M pn = unit_rows(rng, n), gn = unit_rows(rng, n);
  std::vector<Eigen::Index> rows{0, 2, 3, 5, 8, 11};
  Graph<double> g;
  EXPECT_NEAR(g.scalar(graph_loss_rgb(g, g.input(pc), g.input(gc))), loss_rgb(pc, gc), 1e-12);
  V ps(6), gs(6);
  M pns(6, 3), gns(6, 3);
  for (int i = 0; i < 6; ++i) {
    ps(i) = pd(rows[i], 0), gs(i) = gd(rows[i], 0);
    pns.row(i) = pn.row(rows[i]);
    gns.row(i) = gn.row(rows[i]);
  }
  EXPECT_NEAR(g.scalar(graph_loss_depth(g, g.input(pd), gd, rows)), loss_depth(ps, gs), 1e-12);
  EXPECT_NEAR(g.scalar(graph_loss_normal(g, g.input(pn), g.input(gn), rows)), loss_normal(pns, gns), 1e-12);
  EXPECT_EQ(g.scalar(graph_loss_depth(g, g.input(pd), gd, {})), 0.0);
}

TEST(Sdc, ZeroOnIdenticalOutputsAndSelfNeighbor) {
  n2p::Rng rng(7);
  const int n = 5;
  const M f = test::random_matrix(rng, n, 4), c = test::random_matrix(rng, n, 3, 0, 1);
  M d(n, 1);
  for (int i = 0; i < n; ++i) d(i, 0) = rng.uniform(2, 9);
  Graph<double> g;
  const Var fv = g.input(f), cv = g.input(c), dv = g.input(d);
  SdcInputs<double> in{fv, fv, cv, cv, dv, dv, c, c, d, d, {0, 1, 2, 3, 4}};
  const auto parts = graph_loss_sdc(g, in, LossWeights{});
  EXPECT_NEAR(g.scalar(parts.total), 0.0, 1e-15);
}

TEST(Sdc, ContrastTermsAndWeights) {
  M ch(1, 3), cn(1, 3), gh(1, 3), gn(1, 3);
  ch << 0.5, 0.5, 0.5;
  cn << 0.5, 0.5, 0.5;
  gh << 0.9, 0.5, 0.5;
  gn << 0.4, 0.5, 0.5;
  M f = M::Zero(1, 2);
  M dh(1, 1), dn(1, 1);
  dh << 3;
  dn << 3;
  Graph<double> g;
  LossWeights w;
  SdcInputs<double> in{g.input(f), g.input(f), g.input(ch), g.input(cn), g.input(dh), g.input(dn), gh, gn, dh, dn, {}};
  const auto p = graph_loss_sdc(g, in, w);
  // predicted contrast 0, true contrast 0.5 in red
  EXPECT_NEAR(g.scalar(p.rgb), 0.25, 1e-15);
  EXPECT_EQ(g.scalar(p.depth), 0.0);
  EXPECT_NEAR(g.scalar(p.total), w.sdc_rgb * 0.25, 1e-15);
}

// End-to-end differentiability of the combined objective on a toy problem.
TEST(GraphLosses, TotalGradientMatchesFiniteDifferences) {
  n2p::Rng rng(8);
  std::vector<Parameter<double>> ps;
  ps.emplace_back("w", test::random_matrix(rng, 9, 4));
  ps.emplace_back("b", test::random_matrix(rng, 1, 9));
  const M x = test::random_matrix(rng, 4, 4);
  const M gc = test::random_matrix(rng, 4, 3, 0, 1);
  M gd(4, 1);
  gd << 2, 5, 3, 8;
  const M gn = unit_rows(rng, 4);
  const LossWeights w;
  const auto res = test::grad_check(ps, [&](Graph<double>& g) {
    const Var h = g.affine(g.input(x), ps[0], ps[1]);
    const Var color = g.sigmoid(g.slice_cols(h, 0, 3));
    const Var depth = g.linear(g.softplus(g.slice_cols(h, 3, 1)), 1.0, 1.0);
    const Var normal = g.normalize_rows(g.slice_cols(h, 4, 3), 1e-6);
    const Var feat = g.slice_cols(h, 6, 3);
    const std::vector<Eigen::Index> all{0, 1, 2, 3};
    const Var rec = g.add(g.add(graph_loss_rgb(g, color, g.input(gc)),
                                g.linear(graph_loss_depth(g, depth, gd, all), 0.1)),
                          g.linear(graph_loss_normal(g, normal, g.input(gn), all), 0.005));
    const std::vector<Eigen::Index> a{0, 1}, b{2, 3};
    SdcInputs<double> in{g.gather_rows(feat, a), g.gather_rows(feat, b), g.gather_rows(color, a), g.gather_rows(color, b),
                         g.gather_rows(depth, a), g.gather_rows(depth, b), gc.topRows(2), gc.bottomRows(2),
                         gd.topRows(2), gd.bottomRows(2), {0, 1}};
    const Var sdc = graph_loss_sdc(g, in, w).total;
    const Var tic = graph_loss_tic(g, g.gather_rows(feat, {0}), g.gather_rows(feat, {3}));
    return g.add(rec, g.add(g.linear(sdc, w.beta), g.linear(tic, w.gamma)));
  });
  EXPECT_GT(res.checked, 20);
  EXPECT_LE(res.max_rel, 1e-3);
}
