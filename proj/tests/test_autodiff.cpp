#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "projforge/autodiff.hpp"
#include "projforge/rng.hpp"

using namespace projforge;
using ad::Tape;
using ad::Var;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Wraps a tape-building function of one watched input into a ScalarFunction.
ad::ScalarFunction wrap(ad::Shape shape, std::function<Var(Tape&, Var)> build) {
  return [shape, build](std::span<const double> x, std::vector<double>* grad) {
    Tape tape;
    Var in = tape.variable(shape, std::vector<double>(x.begin(), x.end()));
    Var out = build(tape, in);
    const double v = tape.scalar(out);
    if (grad) {
      const auto g = tape.backward(out).of(in);
      grad->assign(g.begin(), g.end());
    }
    return v;
  };
}

void expect_gradcheck(const ad::ScalarFunction& f, const std::vector<double>& x, double tol = 1e-5) {
  const auto report = ad::check_gradients(f, x, 1e-5, tol, 500, 1);
  EXPECT_TRUE(report.passed) << "worst rel err " << report.worst_relative_error << " at "
                             << report.worst_index << " analytic " << report.analytic_at_worst
                             << " numeric " << report.numeric_at_worst;
}

}  // namespace

TEST(Backward, SumGivesOnes) {
  Tape tape;
  Var v = tape.variable({5}, {1, -2, 3, 0.5, 9});
  const auto g = tape.backward(tape.sum(v));
  for (double d : g.of(v)) EXPECT_EQ(d, 1.0);
}

TEST(Backward, L1ResidualMatchesClosedForm) {
  const int m = 4, n = 3;
  const auto a = random_vec(m * n, 1);
  const auto v = random_vec(n, 2);
  const auto y = random_vec(m, 3);
  Tape tape;
  Var A = tape.constant({m, n}, a);
  Var x = tape.variable({1, n}, v);
  Var zero = tape.constant({m}, std::vector<double>(m, 0.0));
  Var av = tape.dense(x, A, zero);
  std::vector<double> neg_y(y);
  for (double& t : neg_y) t = -t;
  Var loss = tape.sum(tape.abs(tape.add_const(av, ad::make_constant(neg_y))));
  const auto g = tape.backward(loss).of(x);
  for (int j = 0; j < n; ++j) {
    double want = 0;
    for (int i = 0; i < m; ++i) {
      double r = -y[i];
      for (int k = 0; k < n; ++k) r += a[i * n + k] * v[k];
      ASSERT_NE(r, 0.0);
      want += a[i * n + j] * ad::sign(r);
    }
    EXPECT_NEAR(g[j], want, 1e-12);
  }
}

TEST(Backward, IsLinearInTheLoss) {
  const auto x0 = random_vec(12, 4);
  auto l1 = [](Tape& t, Var x) { return t.sum(t.mul(t.sigmoid(x), t.squash(x))); };
  auto l2 = [](Tape& t, Var x) { return t.pnorm(t.affine(x, 2.0, 0.3), 3.0); };
  auto grad_of = [&](auto build) {
    Tape t;
    Var x = t.variable({12}, x0);
    const auto g = t.backward(build(t, x)).of(x);
    return std::vector<double>(g.begin(), g.end());
  };
  const auto g1 = grad_of(l1);
  const auto g2 = grad_of(l2);
  const auto gc = grad_of([&](Tape& t, Var x) {
    return t.add(t.scale(l1(t, x), 1.5), t.scale(l2(t, x), -0.25));
  });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 1.5 * g1[i] - 0.25 * g2[i], 1e-12);
}

TEST(Backward, Deterministic) {
  const auto x0 = random_vec(3 * 5 * 5, 5, 0, 1);
  const auto w0 = random_vec(4 * 3 * 3 * 3, 6);
  auto run = [&] {
    Tape t;
    Var x = t.variable({5, 5, 3}, x0);
    Var w = t.variable({4, 3, 3, 3}, w0);
    Var b = t.constant({4}, {0.1, 0.2, -0.1, 0});
    Var y = t.conv2d(x, w, b, 2, 1);
    const auto g = t.backward(t.total_variation(t.relu(y)));
    const auto gx = g.of(x), gw = g.of(w);
    std::vector<double> out(gx.begin(), gx.end());
    out.insert(out.end(), gw.begin(), gw.end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, Errors) {
  Tape t;
  Var v = t.variable({3}, {1, 2, 3});
  EXPECT_THROW(t.backward(v), InputError);
  Var s = t.sum(v);
  t.backward(s);
  EXPECT_THROW(t.backward(s), InputError);
  EXPECT_THROW(t.sum(v), InputError);

  Tape u;
  Var a = u.variable({2}, {1, 2});
  Var b = u.variable({3}, {1, 2, 3});
  EXPECT_THROW(u.add(a, b), InputError);
  EXPECT_THROW(u.variable({1}, {NAN}), NumericalError);
}

TEST(Backward, ConstantsGetNoGradient) {
  Tape t;
  Var c = t.constant({2}, {1, 2});
  Var v = t.variable({2}, {3, 4});
  const auto g = t.backward(t.sum(t.mul(c, v)));
  EXPECT_TRUE(g.of(c).empty());
  EXPECT_EQ(g.of(v)[0], 1.0);
  EXPECT_EQ(g.of(v)[1], 2.0);
}

TEST(Subgradients, KinkConventions) {
  Tape t;
  Var x = t.variable({5}, {0.0, -1.0, 1.0, 0.0, 1.0});
  Var r = t.sum(t.relu(x));
  Var a = t.sum(t.abs(x));
  Var c = t.sum(t.clamp(x, 0.0, 1.0));
  const auto g = t.backward(t.add(t.add(r, a), c));
  // relu'(0)=0, sign(0)=0, clamp' = 0 on the boundary
  EXPECT_EQ(g.of(x)[0], 0.0);
  EXPECT_EQ(g.of(x)[1], -1.0);
  EXPECT_EQ(g.of(x)[2], 2.0);
  EXPECT_EQ(g.of(x)[4], 2.0);

  Tape z;
  Var zero = z.variable({4}, {0, 0, 0, 0});
  const auto gz = z.backward(z.pnorm(zero, 2.0));
  for (double d : gz.of(zero)) EXPECT_EQ(d, 0.0);
}

TEST(CheckGradients, Square) {
  auto f = [](std::span<const double> x, std::vector<double>* g) {
    if (g) *g = {2 * x[0]};
    return x[0] * x[0];
  };
  const auto r = ad::check_gradients(f, {3.0}, 1e-4, 1e-6, 1, 0);
  EXPECT_TRUE(r.passed);
  EXPECT_NEAR(r.analytic_at_worst, 6.0, 1e-12);
  EXPECT_NEAR(r.numeric_at_worst, 6.0, 1e-6);
}

TEST(CheckGradients, ReportsWrongGradient) {
  auto f = [](std::span<const double> x, std::vector<double>* g) {
    if (g) *g = {3 * x[0]};
    return x[0] * x[0];
  };
  const auto r = ad::check_gradients(f, {3.0}, 1e-4, 1e-4, 1, 0);
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.worst_relative_error, 1.0 / 3.0, 1e-6);
}

TEST(CheckGradients, TotalVariation) {
  const auto x = random_vec(6 * 6 * 3, 21, 0, 1);
  const auto r = ad::check_gradients(wrap({6, 6, 3}, [](Tape& t, Var v) { return t.total_variation(v); }),
                                     x, 1e-4, 1e-5, 200, 3);
  EXPECT_TRUE(r.passed) << r.worst_relative_error << " " << r.analytic_at_worst << " " << r.numeric_at_worst;
}

// One finite-difference audit per operator.
TEST(OperatorGradients, Elementwise) {
  const auto x = random_vec(10, 7);
  const auto c = ad::make_constant(random_vec(10, 8));
  expect_gradcheck(wrap({10}, [&](Tape& t, Var v) { return t.sum(t.mul(t.sigmoid(v), v)); }), x);
  expect_gradcheck(wrap({10}, [&](Tape& t, Var v) { return t.sum(t.mul(t.squash(v), t.sub(v, t.affine(v, 0.3, 1.0)))); }), x);
  expect_gradcheck(wrap({10}, [&](Tape& t, Var v) { return t.sum(t.mul_const(t.add_const(t.mul(v, v), c), c)); }), x);
  expect_gradcheck(wrap({10}, [&](Tape& t, Var v) { return t.sum(t.mul(t.clamp(v, -0.5, 0.5), v)); }), x);
  expect_gradcheck(wrap({10}, [&](Tape& t, Var v) { return t.sum(t.mul(t.relu(v), t.abs(v))); }), x);
}

TEST(OperatorGradients, Norms) {
  const auto x = random_vec(15, 9);
  for (double p : {1.0, 1.5, 2.0, 3.0}) {
    expect_gradcheck(wrap({15}, [&](Tape& t, Var v) { return t.pnorm(v, p); }), x);
  }
}

TEST(OperatorGradients, Structural) {
  const auto x = random_vec(4 * 5 * 3, 10);
  auto map = std::make_shared<PixelMap>(4, 5, 3, 3);
  Rng rng(11);
  for (std::size_t p = 0; p < map->out_pixels(); ++p) {
    map->set_taps(p, bilinear_taps(4, 5, {rng.uniform(0, 4), rng.uniform(0, 3)}));
  }
  const auto w = ad::make_constant(random_vec(3 * 3 * 3, 12));
  expect_gradcheck(wrap({4, 5, 3}, [&](Tape& t, Var v) {
    Var m = t.map(v, map);
    return t.sum(t.mul_const(t.mul(m, m), w));
  }), x);
  expect_gradcheck(wrap({4, 5, 3}, [&](Tape& t, Var v) {
    Var r = t.reshape(v, {20, 3});
    Var cat = t.concat(t.slice(r, 1, 2), t.sigmoid(r));
    return t.sum(t.mul(cat, cat));
  }), x);
}

TEST(OperatorGradients, DenseAndConv) {
  const auto x = random_vec(6 * 6 * 2, 13);
  const auto wd = random_vec(3 * 2 * 3 * 3, 14);
  expect_gradcheck(wrap({6, 6, 2}, [&](Tape& t, Var v) {
    Var w = t.constant({3, 3, 3, 2}, wd);
    Var b = t.constant({3}, {0.1, -0.2, 0.3});
    return t.sum(t.sigmoid(t.conv2d(v, w, b, 2, 1)));
  }), x);
  // Gradient w.r.t. the kernel as well.
  expect_gradcheck(wrap({3, 3, 3, 2}, [&](Tape& t, Var w) {
    Var in = t.constant({6, 6, 2}, x);
    Var b = t.constant({3}, {0.1, -0.2, 0.3});
    return t.sum(t.sigmoid(t.conv2d(in, w, b, 1, 1)));
  }), wd);
  const auto wm = random_vec(4 * 5, 15);
  expect_gradcheck(wrap({3, 5}, [&](Tape& t, Var v) {
    Var w = t.constant({4, 5}, wm);
    Var b = t.constant({4}, {0, 1, 0, -1});
    return t.sum(t.sigmoid(t.dense(v, w, b)));
  }), random_vec(15, 16));
  expect_gradcheck(wrap({4, 5}, [&](Tape& t, Var w) {
    Var in = t.constant({3, 5}, random_vec(15, 16));
    Var b = t.variable({4}, {0, 1, 0, -1});
    return t.sum(t.sigmoid(t.dense(in, w, b)));
  }), wm);
}

TEST(OperatorGradients, Losses) {
  const auto x = random_vec(8, 17, -3, 3);
  const auto target = ad::make_constant({1, 0, 1, 0, 0.5, 1, 0, 0});
  const auto weight = ad::make_constant({1, 2, 0, 1, 1, 0.5, 1, 3});
  expect_gradcheck(wrap({8}, [&](Tape& t, Var v) { return t.bce_with_logits(v, target, weight); }), x);
  expect_gradcheck(wrap({8}, [&](Tape& t, Var v) { return t.squared_error(v, target, weight); }), x);

  Tape t;
  Var z = t.variable({1}, {0.0});
  Var l = t.bce_with_logits(z, ad::make_constant({1.0}), ad::make_constant({1.0}));
  EXPECT_NEAR(t.scalar(l), std::log(2.0), 1e-15);
}
