#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/checkpoint.hpp"
#include "n2p/optim.hpp"
#include "support.hpp"

using namespace n2p;
using test::grad_check;
using test::random_matrix;
using M = Matrix<double>;

namespace {

M row(std::initializer_list<double> v) {
  M m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

}  // namespace

TEST(Forward, IdentityGraph) {
  Graph<double> g;
  const Var x = g.input(row({1, 2, 3}));
  EXPECT_EQ(g.value(x), row({1, 2, 3}));
}

TEST(Forward, AffineIdentity) {
  Parameter<double> w("w", M::Identity(3, 3)), b("b", M::Zero(1, 3));
  Graph<double> g;
  const Var y = g.affine(g.input(row({0.5, -2, 7})), w, b);
  EXPECT_EQ(g.value(y), row({0.5, -2, 7}));
}

TEST(Forward, SoftmaxOfZeros) {
  Graph<double> g;
  const Var y = g.softmax_rows(g.input(row({0, 0})));
  EXPECT_DOUBLE_EQ(g.value(y)(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(g.value(y)(0, 1), 0.5);
}

TEST(Forward, AffineShapeMismatchNamesNode) {
  Parameter<double> w("w", M::Identity(3, 3)), b("b", M::Zero(1, 3));
  Graph<double> g;
  const Var x = g.input(row({1, 2}));
  try {
    g.affine(x, w, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("affine at node #"), std::string::npos);
  }
}

TEST(Forward, ReplayIsDeterministic) {
  Rng rng(3);
  Parameter<double> w("w", random_matrix(rng, 4, 3)), b("b", random_matrix(rng, 1, 4));
  Graph<double> g;
  const Var x = g.input(random_matrix(rng, 5, 3));
  const Var y = g.sum(g.sigmoid(g.affine(x, w, b)));
  const M first = g.value(y);
  g.forward();
  EXPECT_EQ(g.value(y), first);
  const M other = random_matrix(rng, 5, 3);
  g.set_input(x, other);
  g.forward();
  Graph<double> h;
  const Var y2 = h.sum(h.sigmoid(h.affine(h.input(other), w, b)));
  EXPECT_EQ(g.value(y), h.value(y2));
}

TEST(Backward, SquareGradient) {
  Parameter<double> w("w", M::Constant(1, 1, 3.0));
  Graph<double> g;
  const Var y = g.square(g.param(w));
  g.backward(y);
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 6.0);
}

TEST(Backward, AffineGradientIsOuterProduct) {
  Rng rng(5);
  Parameter<double> w("w", random_matrix(rng, 2, 3)), b("b", M::Zero(1, 2));
  const M x = random_matrix(rng, 1, 3);
  const M seed = row({0.7, -1.3});
  Graph<double> g;
  const Var y = g.affine(g.input(x), w, b);
  g.backward(y, seed);
  const M outer = seed.transpose() * x;
  EXPECT_LT((w.grad - outer).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((b.grad - seed).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Backward, BeforeForwardIsAnError) {
  Parameter<double> w("w", M::Constant(1, 1, 2.0));
  Graph<double> g;
  const Var x = g.input(M::Constant(1, 1, 1.0));
  const Var y = g.mul(g.param(w), x);
  g.set_input(x, M::Constant(1, 1, 4.0));
  EXPECT_THROW(g.backward(y), StateError);
  g.forward();
  EXPECT_NO_THROW(g.backward(y));
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 4.0);
}

TEST(Backward, SeedShapeMismatch) {
  Graph<double> g;
  Parameter<double> w("w", M::Zero(2, 2));
  const Var y = g.relu(g.param(w));
  EXPECT_THROW(g.backward(y, M::Ones(1, 2)), ShapeError);
}

TEST(Backward, LeavesValuesUnchanged) {
  Rng rng(8);
  Parameter<double> w("w", random_matrix(rng, 3, 3)), b("b", random_matrix(rng, 1, 3));
  Graph<double> g;
  const Var h = g.softplus(g.affine(g.input(random_matrix(rng, 4, 3)), w, b));
  const Var y = g.mean(h);
  const M before = g.value(h);
  g.backward(y);
  EXPECT_EQ(g.value(h), before);
  EXPECT_TRUE(w.grad.allFinite());
}

TEST(Backward, NodeGradBeforeBackward) {
  Graph<double> g;
  const Var x = g.input(M::Ones(1, 1));
  EXPECT_THROW(g.node_grad(x), StateError);
}

TEST(GradCheck, ThreeLayerMlp) {
  Rng rng(11);
  std::vector<Parameter<double>> ps;
  const int dims[] = {3, 16, 16, 2};
  for (int l = 0; l < 3; ++l) {
    ps.emplace_back("w" + std::to_string(l), random_matrix(rng, dims[l + 1], dims[l]));
    ps.emplace_back("b" + std::to_string(l), random_matrix(rng, 1, dims[l + 1]));
  }
  const M x = random_matrix(rng, 6, 3);
  const auto res = grad_check(ps, [&](Graph<double>& g) {
    Var h = g.input(x);
    for (int l = 0; l < 3; ++l) {
      h = g.affine(h, ps[2 * l], ps[2 * l + 1]);
      if (l < 2) h = g.relu(h);
    }
    return g.sum(g.square(g.sigmoid(h)));
  });
  EXPECT_GT(res.checked, 300);
  EXPECT_LE(res.max_rel, 1e-3);
}

// Each primitive on random inputs in [-1, 1].
TEST(GradCheck, EveryPrimitive) {
  Rng rng(21);
  std::vector<Parameter<double>> ps;
  ps.emplace_back("a", random_matrix(rng, 6, 4));
  ps.emplace_back("b", random_matrix(rng, 6, 4));
  ps.emplace_back("c", random_matrix(rng, 6, 1));
  Parameter<double>& A = ps[0];
  Parameter<double>& B = ps[1];
  Parameter<double>& C = ps[2];
  const M weights = random_matrix(rng, 6, 4);
  using Fn = std::function<Var(Graph<double>&)>;
  auto weighted = [&](Graph<double>& g, Var v) {
    const auto& val = g.value(v);
    return g.sum(g.mul(v, g.input(weights.topLeftCorner(val.rows(), val.cols()))));
  };
  const std::vector<std::pair<const char*, Fn>> cases = {
      {"relu", [&](Graph<double>& g) { return weighted(g, g.relu(g.param(A))); }},
      {"sigmoid", [&](Graph<double>& g) { return weighted(g, g.sigmoid(g.param(A))); }},
      {"softplus", [&](Graph<double>& g) { return weighted(g, g.softplus(g.param(A))); }},
      {"exp", [&](Graph<double>& g) { return weighted(g, g.exp(g.param(A))); }},
      {"log", [&](Graph<double>& g) { return weighted(g, g.log(g.linear(g.param(A), 0.5, 1.0))); }},
      {"abs", [&](Graph<double>& g) { return weighted(g, g.abs(g.param(A))); }},
      {"max_scalar", [&](Graph<double>& g) { return weighted(g, g.max_scalar(g.param(A), 0.1)); }},
      {"add_sub_mul", [&](Graph<double>& g) {
         return weighted(g, g.mul(g.add(g.param(A), g.param(B)), g.sub(g.param(A), g.param(B))));
       }},
      {"mul_col", [&](Graph<double>& g) { return weighted(g, g.mul_col(g.param(A), g.param(C))); }},
      {"div_col", [&](Graph<double>& g) {
         return weighted(g, g.div_col(g.param(A), g.linear(g.square(g.param(C)), 1.0, 0.5)));
       }},
      {"segment_sum", [&](Graph<double>& g) { return weighted(g, g.segment_sum(g.param(A), 3)); }},
      {"segment_cumsum", [&](Graph<double>& g) { return weighted(g, g.segment_exclusive_cumsum(g.param(C), 3)); }},
      {"row_sum_mean", [&](Graph<double>& g) { return g.add(weighted(g, g.row_sum(g.param(A))), g.mean(g.square(g.param(B)))); }},
      {"softmax", [&](Graph<double>& g) { return weighted(g, g.softmax_rows(g.param(A))); }},
      {"normalize", [&](Graph<double>& g) { return weighted(g, g.normalize_rows(g.param(A), 1e-6)); }},
      {"concat_slice", [&](Graph<double>& g) {
         const Var parts[] = {g.param(A), g.param(C)};
         const Var cat = g.concat_cols(parts);
         const Var rows[] = {g.slice_cols(cat, 2, 3), g.slice_cols(g.param(B), 0, 3)};
         return weighted(g, g.concat_rows(rows));
       }},
      {"gather", [&](Graph<double>& g) { return weighted(g, g.gather_rows(g.param(A), {5, 0, 0, 3})); }},
      {"maxmin", [&](Graph<double>& g) { return weighted(g, g.maxmin_norm(g.param(C), 1e-8)); }},
      {"jsd", [&](Graph<double>& g) {
         return weighted(g, g.jsd_rows(g.softmax_rows(g.param(A)), g.softmax_rows(g.param(B))));
       }},
  };
  for (const auto& [name, fn] : cases) {
    const auto res = grad_check(ps, fn);
    EXPECT_GT(res.checked, 0) << name;
    EXPECT_LE(res.max_rel, 1e-3) << name;
  }
}

TEST(Softmax, IsProbabilityVector) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    Graph<double> g;
    const Var y = g.softmax_rows(g.input(random_matrix(rng, 3, 7, -20, 20)));
    const M& p = g.value(y);
    EXPECT_GE(p.minCoeff(), 0.0);
    for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-9);
  }
}

TEST(Determinism, ForwardBackwardUpdateBitIdentical) {
  auto run = [] {
    Rng rng(99);
    std::vector<Parameter<float>> ps;
    ps.emplace_back("w", random_matrix(rng, 8, 5).cast<float>());
    ps.emplace_back("b", random_matrix(rng, 1, 8).cast<float>());
    AdamState<float> st{std::span<const Parameter<float>>(ps)};
    const Matrix<float> x = random_matrix(rng, 16, 5).cast<float>();
    for (int s = 0; s < 5; ++s) {
      for (auto& p : ps) p.zero_grad();
      Graph<float> g;
      g.backward(g.mean(g.square(g.relu(g.affine(g.input(x), ps[0], ps[1])))));
      adam_step(std::span<Parameter<float>>(ps), st, 1e-2);
    }
    return ps[0].value;
  };
  EXPECT_EQ(run(), run());
}

TEST(ParameterInvariants, GradientShapeAndReset) {
  Parameter<double> p("p", M::Ones(3, 2));
  EXPECT_EQ(p.grad.rows(), 3);
  EXPECT_EQ(p.grad.cols(), 2);
  p.grad.setConstant(4.0);
  p.zero_grad();
  EXPECT_EQ(p.grad.cwiseAbs().maxCoeff(), 0.0);
  Parameter<double> q = p;
  EXPECT_NE(q.id, p.id);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("w", M::Constant(2, 2, 1.5));
  AdamState<double> st{std::span<const Parameter<double>>(ps)};
  adam_step(std::span<Parameter<double>>(ps), st, 0.1);
  EXPECT_EQ(ps[0].value, M::Constant(2, 2, 1.5));
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByLr) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("w", M::Zero(1, 1));
  AdamState<double> st{std::span<const Parameter<double>>(ps)};
  ps[0].grad(0, 0) = 1.0;  // f(w) = w
  adam_step(std::span<Parameter<double>>(ps), st, 0.1);
  EXPECT_NEAR(ps[0].value(0, 0), -0.1, 1e-12);
}

TEST(Adam, ConvergesOnQuadratic) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("w", M::Zero(1, 1));
  AdamState<double> st{std::span<const Parameter<double>>(ps)};
  std::int64_t last = 0;
  for (int s = 0; s < 200; ++s) {
    ps[0].grad(0, 0) = 2.0 * (ps[0].value(0, 0) - 5.0);
    adam_step(std::span<Parameter<double>>(ps), st, 0.1);
    EXPECT_GT(st.step, last);
    last = st.step;
  }
  EXPECT_LT(std::abs(ps[0].value(0, 0) - 5.0), 0.05);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("trunk0.w", M::Zero(1, 2));
  AdamState<double> st{std::span<const Parameter<double>>(ps)};
  ps[0].grad(0, 1) = std::nan("");
  try {
    adam_step(std::span<Parameter<double>>(ps), st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("trunk0.w"), std::string::npos);
  }
  EXPECT_EQ(st.step, 0);
}

TEST(Clip, BelowThresholdUnchanged) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("g", M::Zero(1, 2));
  ps[0].grad << 0.03, 0.04;
  clip_gradients(std::span<Parameter<double>>(ps), 0.1, 0.1);
  EXPECT_DOUBLE_EQ(ps[0].grad(0, 0), 0.03);
  EXPECT_DOUBLE_EQ(ps[0].grad(0, 1), 0.04);
}

TEST(Clip, ValueCap) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("g", M::Zero(1, 1));
  ps[0].grad(0, 0) = 1.0;
  clip_gradients(std::span<Parameter<double>>(ps), 10.0, 0.1);
  EXPECT_DOUBLE_EQ(ps[0].grad(0, 0), 0.1);
}

TEST(Clip, NormScalingKeepsDirection) {
  Rng rng(2);
  std::vector<Parameter<double>> ps;
  ps.emplace_back("a", M::Zero(1, 5));
  ps.emplace_back("b", M::Zero(2, 3));
  double sq = 0;
  for (auto& p : ps) {
    p.grad = random_matrix(rng, p.value.rows(), p.value.cols());
    sq += p.grad.squaredNorm();
  }
  for (auto& p : ps) p.grad /= std::sqrt(sq);  // global norm 1
  const std::vector<M> before{ps[0].grad, ps[1].grad};
  const double n = clip_gradients(std::span<Parameter<double>>(ps), 0.1, 1.0);
  EXPECT_NEAR(n, 1.0, 1e-12);
  double after = 0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    after += ps[k].grad.squaredNorm();
    EXPECT_LT((ps[k].grad - 0.1 * before[k]).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_NEAR(std::sqrt(after), 0.1, 1e-12);
}

TEST(Clip, ZeroGradientNoop) {
  std::vector<Parameter<double>> ps;
  ps.emplace_back("g", M::Zero(2, 2));
  EXPECT_EQ(clip_gradients(std::span<Parameter<double>>(ps), 0.1, 0.1), 0.0);
  EXPECT_EQ(ps[0].grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LrSchedule, ClosedForm) {
  const LrSchedule s{100, 5e-3, 5e-4, 2000};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(100, s), 5e-3);
  EXPECT_NEAR(lr_at(2000, s), 5e-4, 1e-9);
  EXPECT_NEAR(lr_at(50, s), 2.5e-3, 1e-15);
  const double mid = 5e-3 * std::pow(0.1, 950.0 / 1900.0);
  EXPECT_NEAR(lr_at(1050, s), mid, 1e-12);
  for (std::int64_t k = 100; k < 2500; ++k) EXPECT_LE(lr_at(k + 1, s), lr_at(k, s));
  EXPECT_THROW(lr_at(-1, s), ValueError);
}

TEST(Checkpoint, RoundTripBitExact) {
  test::TempDir dir("ckpt");
  Rng rng(17);
  std::vector<Parameter<float>> ps;
  ps.emplace_back("w", random_matrix(rng, 4, 3).cast<float>());
  ps.emplace_back("b", random_matrix(rng, 1, 4).cast<float>());
  AdamState<float> st{std::span<const Parameter<float>>(ps)};
  for (auto& p : ps) p.grad.setConstant(0.25f);
  adam_step(std::span<Parameter<float>>(ps), st, 1e-3);
  Checkpoint<float> c;
  c.step = 42;
  c.meta["note"] = "x = 1";
  c.add_group("f/", std::span<const Parameter<float>>(ps), st);
  save_checkpoint(dir.file("c.bin"), c);
  const auto back = load_checkpoint<float>(dir.file("c.bin"));
  EXPECT_EQ(back.step, 42);
  EXPECT_EQ(back.meta_value("note"), "x = 1");
  std::vector<Parameter<float>> qs;
  qs.emplace_back("w", Matrix<float>::Zero(4, 3));
  qs.emplace_back("b", Matrix<float>::Zero(1, 4));
  AdamState<float> st2{std::span<const Parameter<float>>(qs)};
  back.restore_group("f/", std::span<Parameter<float>>(qs), &st2);
  for (std::size_t k = 0; k < ps.size(); ++k) {
    EXPECT_EQ(qs[k].value, ps[k].value);
    EXPECT_EQ(st2.m[k], st.m[k]);
    EXPECT_EQ(st2.v[k], st.v[k]);
  }
  EXPECT_EQ(st2.step, st.step);
}

TEST(Checkpoint, ShapeMismatchAndCorruption) {
  test::TempDir dir("ckpt2");
  std::vector<Parameter<float>> ps;
  ps.emplace_back("w", Matrix<float>::Ones(2, 2));
  Checkpoint<float> c;
  c.add_group("f/", std::span<const Parameter<float>>(ps), AdamState<float>(std::span<const Parameter<float>>(ps)));
  save_checkpoint(dir.file("c.bin"), c);
  std::vector<Parameter<float>> wrong;
  wrong.emplace_back("w", Matrix<float>::Ones(3, 2));
  EXPECT_THROW(load_checkpoint<float>(dir.file("c.bin")).restore_group("f/", std::span<Parameter<float>>(wrong), nullptr),
               ShapeError);
  std::filesystem::resize_file(dir.file("c.bin"), 20);
  EXPECT_THROW(load_checkpoint<float>(dir.file("c.bin")), FormatError);
  EXPECT_THROW(load_checkpoint<float>(dir.file("missing.bin")), IoError);
}
