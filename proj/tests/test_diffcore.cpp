#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mapkd/diffcore.hpp"

using namespace mapkd::diff;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndItem) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_THROW(t.item(), DiffError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1.0}), ShapeError);
}

TEST(Primitives, SoftmaxKnownValues) {
  Tape t;
  Var p = softmax(t.constant(Tensor({3}, {1.0, 2.0, 3.0})));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p.value()[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(p.value()[1], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(p.value()[2], std::exp(3.0) / z, 1e-15);
}

TEST(Primitives, MaskedSoftmax) {
  Tape t;
  Tensor mask({2, 3}, {1, 0, 1, 0, 0, 0});
  Var p = softmax(t.constant(Tensor({2, 3}, {0.0, 5.0, 0.0, 1.0, 2.0, 3.0})), &mask);
  EXPECT_DOUBLE_EQ(p.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(p.value()[2], 0.5);
  for (int i = 3; i < 6; ++i) EXPECT_EQ(p.value()[i], 0.0);
}

TEST(Primitives, LogInvertsExp) {
  Tape t;
  Tensor x({4}, {-3.0, -0.5, 0.0, 2.5});
  Var y = log(exp(t.constant(x)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-15);
}

TEST(Primitives, MatmulShapeAndValues) {
  Tape t;
  Tensor a({2, 1, 2}, {1, 2, 3, 4});
  Tensor w({2, 3}, {1, 0, -1, 2, 1, 0});
  Var y = matmul(t.constant(a), t.constant(w));
  EXPECT_EQ(y.shape(), (Shape{2, 1, 3}));
  const std::vector<double> expect{5, 2, -1, 11, 4, -3};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y.value()[i], expect[i]);
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Primitives, BroadcastRules) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}, 1.0));
  EXPECT_EQ(add(a, t.constant(Tensor({3}, 2.0))).value()[4], 3.0);
  EXPECT_EQ(mul(a, t.constant(Tensor::scalar(5.0))).value()[0], 5.0);
  EXPECT_THROW(add(a, t.constant(Tensor({2}))), ShapeError);
}

TEST(Backward, SquareGradient) {
  Tape t;
  Var x = t.input(Tensor({3}, {-1.5, 0.0, 2.0}));
  t.backward(sum(square(x)));
  const Tensor g = t.grad(x);
  EXPECT_DOUBLE_EQ(g[0], -3.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 4.0);
}

TEST(Backward, AbsGradientAtMinusTwo) {
  Tape t;
  Var x = t.input(Tensor::scalar(-2.0));
  t.backward(abs(x));
  EXPECT_DOUBLE_EQ(t.grad(x).item(), -1.0);
}

TEST(Backward, ParameterGradientAccumulates) {
  Parameter p{"w", Tensor({2}, {1.0, 2.0}), Tensor({2})};
  Tape t;
  Var w = t.param(p);
  t.backward(sum(mul(w, w)));
  EXPECT_DOUBLE_EQ(p.grad[0], 2.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 4.0);
}

TEST(Backward, OnlyOncePerTape) {
  Tape t;
  Var x = t.input(Tensor::scalar(1.0));
  Var y = square(x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), DiffError);
}

TEST(Backward, RequiresScalar) {
  Tape t;
  Var x = t.input(Tensor({2}, 1.0));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Backward, ConstantsGetNoGradient) {
  Tape t;
  Var c = t.constant(Tensor({2}, 3.0));
  Var x = t.input(Tensor({2}, 1.0));
  t.backward(sum(mul(c, x)));
  EXPECT_EQ(t.grad(c), Tensor({2}, 0.0));
  EXPECT_EQ(t.grad(x), Tensor({2}, 3.0));
}

TEST(NonFinite, ForwardReportsOp) {
  Tape t;
  Var x = t.input(Tensor::scalar(0.0));
  try {
    log(x);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.op_name(), "log");
    EXPECT_EQ(e.op_id(), 1);
    EXPECT_FALSE(e.in_backward());
  }
}

TEST(Gradcheck, CubeBelowOneInAMillion) {
  ScalarFn fn = [](Tape&, std::span<const Var> x) { return sum(mul(x[0], mul(x[0], x[0]))); };
  const auto r = gradcheck(fn, {Tensor({4}, {-1.3, -0.2, 0.7, 1.9})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradcheck, SumOfDyadicInputsIsExact) {
  // Central differences of a linear function on dyadic values with a
  // power-of-two step involve no rounding at all.
  ScalarFn fn = [](Tape&, std::span<const Var> x) { return sum(x[0]); };
  GradcheckOptions opt;
  opt.step = 1.0 / 1024.0;
  const auto r = gradcheck(fn, {Tensor({5}, {0.5, -0.25, 1.0, 2.125, -3.0})}, opt);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(Gradcheck, DetectsAWrongGradient) {
  // |x| near zero with the kink margin disabled and a step spanning the kink
  // disagrees with the subgradient.
  ScalarFn fn = [](Tape&, std::span<const Var> x) { return sum(abs(x[0])); };
  GradcheckOptions opt;
  opt.kink_margin = 0.0;
  opt.step = 1e-3;
  const auto r = gradcheck(fn, {Tensor({1}, {1e-4})}, opt);
  EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(Gradcheck, RandomCompositions) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng() % 3, k = 1 + rng() % 4, n = 1 + rng() % 4;
    Tensor a = random_tensor(rng, {b, k}), w = random_tensor(rng, {k, n});
    ScalarFn fn = [](Tape&, std::span<const Var> x) {
      return sum(log_softmax(tanh(matmul(x[0], x[1]))));
    };
    EXPECT_LT(gradcheck(fn, {a, w}).max_rel_error, 1e-6) << "trial " << trial;
  }
}

// ---- properties --------------------------------------------------------

TEST(Properties, GradientIsLinearInTheLoss) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    const Tensor x0 = random_tensor(rng, {n});
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const double a = u(rng), b = u(rng);
    auto grad_of = [&](auto build) {
      Tape t;
      Var x = t.input(x0);
      t.backward(build(x));
      return t.grad(x);
    };
    const Tensor gf = grad_of([](Var x) { return sum(exp(x)); });
    const Tensor gg = grad_of([](Var x) { return sum(tanh(x)); });
    const Tensor gh = grad_of([&](Var x) { return add(scale(sum(exp(x)), a), scale(sum(tanh(x)), b)); });
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(gh[i], a * gf[i] + b * gg[i], 1e-12);
  }
}

TEST(Properties, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng() % 5, c = 1 + rng() % 7;
    Tape t;
    Var p = softmax(t.constant(random_tensor(rng, {r, c}, -30.0, 30.0)));
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += p.value()[i * c + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, EvaluationIsDeterministic) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor(rng, {3, 4}), w = random_tensor(rng, {4, 2});
  auto run = [&] {
    Tape t;
    Var x = t.input(a);
    Var y = sum(softmax(relu(matmul(x, t.constant(w)))));
    t.backward(y);
    return std::make_pair(y.item(), t.grad(x));
  };
  const auto r1 = run(), r2 = run();
  EXPECT_EQ(r1.first, r2.first);
  EXPECT_EQ(r1.second, r2.second);
}

TEST(Properties, ReductionsAgreeWithLoops) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 1 + rng() % 4, c = 1 + rng() % 5;
    const Tensor x = random_tensor(rng, {r, c});
    Tape t;
    Var v = t.constant(x);
    Var s0 = sum_axis(v, 0), m1 = mean_axis(v, 1), x1 = max_axis(v, 1);
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) s += x[i * c + j];
      EXPECT_NEAR(s0.value()[j], s, 1e-12);
    }
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0, m = -INFINITY;
      for (std::size_t j = 0; j < c; ++j) s += x[i * c + j], m = std::max(m, x[i * c + j]);
      EXPECT_NEAR(m1.value()[i], s / c, 1e-12);
      EXPECT_EQ(x1.value()[i], m);
    }
  }
}
