#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "ntg/autograd.hpp"
#include "oracles.hpp"

using ntg::Grid;
namespace ad = ntg::ad;

namespace {

constexpr double kTol = 1e-6;

using UnaryOp = std::function<ad::Var(ad::Tape&, const ad::Var&)>;

/// Checks d/dx sum(op(x) * R) against central differences.
double check_unary(const Grid& x0, const UnaryOp& op, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Grid out_shape_probe;
  {
    ad::Tape t;
    out_shape_probe = op(t, t.constant(x0)).value();
  }
  const Grid R = oracle::random_grid(rng, out_shape_probe.channels(), out_shape_probe.height(), out_shape_probe.width());
  auto loss_of = [&](ad::Tape& t, const ad::Var& x) { return ad::sum(ad::mul(op(t, x), t.constant(R))); };
  ad::Tape tape;
  ad::Var x = tape.variable(x0);
  tape.backward(loss_of(tape, x));
  const Grid g = tape.gradient(x);
  auto f = [&](std::span<const double> p) {
    ad::Tape t;
    Grid xv(x0.shape());
    std::copy(p.begin(), p.end(), xv.values().begin());
    return loss_of(t, t.constant(xv)).value()[0];
  };
  return ad::finite_diff_check(f, std::vector<double>(x0.values().begin(), x0.values().end()), g.values(), 1e-5)
      .max_relative_error;
}

/// Values kept away from the ReLU kink so central differences are smooth.
Grid away_from_zero(std::mt19937_64& rng, std::size_t c, std::size_t h, std::size_t w) {
  Grid g = oracle::random_grid(rng, c, h, w);
  for (double& v : g.values()) v = v < 0 ? v - 0.1 : v + 0.1;
  return g;
}

}  // namespace

TEST(Autograd, SumGivesOnes) {
  ad::Tape t;
  ad::Var x = t.variable(Grid(2, 3, 3, 0.5));
  t.backward(ad::sum(x));
  const Grid g = t.gradient(x);
  for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Autograd, SquareSumGivesTwoX) {
  std::mt19937_64 rng(1);
  Grid x0 = oracle::random_grid(rng, 1, 4, 4);
  ad::Tape t;
  ad::Var x = t.variable(x0);
  t.backward(ad::square_sum(x));
  Grid g = t.gradient(x);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], 2.0 * x0[i]);
}

TEST(Autograd, SecondBackwardRejected) {
  ad::Tape t;
  ad::Var x = t.variable(Grid(1, 1, 1, 2.0));
  ad::Var l = ad::sum(x);
  t.backward(l);
  EXPECT_THROW(t.backward(l), ntg::StaleTapeError);
  EXPECT_THROW(t.constant(Grid(1, 1, 1)), ntg::StaleTapeError);
  t.reset();
  ad::Var y = t.variable(Grid(1, 1, 1, 2.0));
  EXPECT_NO_THROW(t.backward(ad::sum(y)));
}

TEST(Autograd, NonScalarLossRejected) {
  ad::Tape t;
  ad::Var x = t.variable(Grid(1, 2, 2));
  EXPECT_THROW(t.backward(x), ntg::ShapeError);
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  ad::Tape t;
  ad::Var c = t.constant(Grid(1, 2, 2, 3.0));
  ad::Var x = t.variable(Grid(1, 2, 2, 1.0));
  t.backward(ad::sum(ad::mul(c, x)));
  EXPECT_FALSE(t.requires_grad(c));
  const Grid gc = t.gradient(c), gx = t.gradient(x);
  for (double v : gc.values()) EXPECT_EQ(v, 0.0);
  for (double v : gx.values()) EXPECT_EQ(v, 3.0);
}

TEST(Autograd, ReluSubgradientAtZeroIsZero) {
  ad::Tape t;
  ad::Var x = t.variable(Grid(1, 1, 2, std::vector<double>{0.0, 1.0}));
  t.backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(t.gradient(x)[0], 0.0);
  EXPECT_EQ(t.gradient(x)[1], 1.0);
}

TEST(Autograd, GradientOfSumIsSumOfGradients) {
  std::mt19937_64 rng(2);
  Grid x0 = oracle::random_grid(rng, 2, 4, 4);
  auto grad_of = [&](int which) {
    ad::Tape t;
    ad::Var x = t.variable(x0);
    ad::Var a = ad::square_sum(ad::sigmoid(x));
    ad::Var b = ad::sum(ad::gram(x));
    t.backward(which == 0 ? a : which == 1 ? b : ad::add(a, b));
    return t.gradient(x);
  };
  Grid ga = grad_of(0), gb = grad_of(1), gab = grad_of(2);
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(gab[i], ga[i] + gb[i], 1e-12 * std::max(1.0, std::abs(gab[i])));
}

TEST(Autograd, IdenticalTapesGiveIdenticalGradients) {
  std::mt19937_64 rng(3);
  Grid x0 = oracle::random_grid(rng, 2, 6, 6);
  Grid w0 = oracle::random_grid(rng, 3, 2, 9);
  auto run = [&] {
    ad::Tape t;
    ad::Var x = t.variable(x0);
    ad::Var w = t.variable(w0);
    t.backward(ad::square_sum(ad::conv2d(x, w, ad::Var{}, ntg::ConvGeometry{2, 3, 3, 3, 1, 1})));
    return std::pair{t.gradient(x), t.gradient(w)};
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, Quadratic) {
  std::vector<double> p{3.0};
  std::vector<double> g{6.0};
  auto r = ad::finite_diff_check([](std::span<const double> q) { return q[0] * q[0]; }, p, g, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-8);
  EXPECT_NEAR(r.worst_numeric, 6.0, 1e-8);
}

TEST(FiniteDiff, ConstantFunction) {
  std::vector<double> p{1.0, 2.0};
  std::vector<double> g{0.0, 0.0};
  auto r = ad::finite_diff_check([](std::span<const double>) { return 4.0; }, p, g, 1e-5);
  EXPECT_EQ(r.max_relative_error, 0.0);
}

TEST(FiniteDiff, RejectsBadStepAndNonFinite) {
  std::vector<double> p{1.0};
  std::vector<double> g{0.0};
  EXPECT_THROW(ad::finite_diff_check([](std::span<const double>) { return 1.0; }, p, g, 0.0), ntg::ArgumentError);
  EXPECT_THROW(ad::finite_diff_check([](std::span<const double>) { return std::nan(""); }, p, g, 1e-5),
               ntg::NumericError);
}

class Primitive : public ::testing::Test {
 protected:
  std::mt19937_64 rng{42};
};

TEST_F(Primitive, Elementwise) {
  Grid x0 = away_from_zero(rng, 2, 3, 4);
  Grid other = oracle::random_grid(rng, 2, 3, 4);
  EXPECT_LT(check_unary(x0, [&](ad::Tape& t, const ad::Var& x) { return ad::add(x, t.constant(other)); }), kTol);
  EXPECT_LT(check_unary(x0, [&](ad::Tape& t, const ad::Var& x) { return ad::sub(t.constant(other), x); }), kTol);
  EXPECT_LT(check_unary(x0, [&](ad::Tape& t, const ad::Var& x) { return ad::mul(x, t.constant(other)); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::mul(x, x); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::affine(x, -1.5, 0.25); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::relu(x); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::leaky_relu(x, 0.2); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::sigmoid(x); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::abs(x); }), kTol);
  Grid pos = oracle::random_grid(rng, 1, 3, 3, 0.2, 2.0);
  EXPECT_LT(check_unary(pos, [](ad::Tape&, const ad::Var& x) { return ad::log_guarded(x); }), kTol);
}

TEST_F(Primitive, Reductions) {
  Grid x0 = oracle::random_grid(rng, 2, 3, 3);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::sum(x); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::mean(x); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::square_sum(x); }), kTol);
}

TEST_F(Primitive, MapAndConcat) {
  Grid x0 = oracle::random_grid(rng, 3, 4, 4);
  Grid m = oracle::random_grid(rng, 1, 4, 4);
  Grid b = oracle::random_grid(rng, 2, 4, 4);
  EXPECT_LT(check_unary(x0, [&](ad::Tape& t, const ad::Var& x) { return ad::mul_map(x, t.constant(m)); }), kTol);
  EXPECT_LT(check_unary(m, [&](ad::Tape& t, const ad::Var& map) { return ad::mul_map(t.constant(x0), map); }), kTol);
  EXPECT_LT(check_unary(x0, [&](ad::Tape& t, const ad::Var& x) { return ad::concat(x, t.constant(b)); }), kTol);
  EXPECT_LT(check_unary(b, [&](ad::Tape& t, const ad::Var& y) { return ad::concat(t.constant(x0), y); }), kTol);
}

TEST_F(Primitive, PoolingAndUpsampling) {
  EXPECT_LT(check_unary(oracle::random_grid(rng, 2, 4, 6), [](ad::Tape&, const ad::Var& x) { return ad::avg_pool2(x); }),
            kTol);
  EXPECT_LT(check_unary(oracle::random_grid(rng, 2, 5, 3), [](ad::Tape&, const ad::Var& x) { return ad::avg_pool2(x); }),
            kTol);
  EXPECT_LT(check_unary(oracle::random_grid(rng, 2, 3, 3),
                        [](ad::Tape&, const ad::Var& x) { return ad::upsample_nearest2(x); }),
            kTol);
}

TEST_F(Primitive, Resample) {
  Grid x0 = oracle::random_grid(rng, 2, 5, 6);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::resample(x, 10, 12); }), kTol);
  EXPECT_LT(check_unary(x0, [](ad::Tape&, const ad::Var& x) { return ad::resample(x, 3, 2); }), kTol);
}

TEST_F(Primitive, ConvolutionAllInputs) {
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}, {2, 0}}) {
    const ntg::ConvGeometry g{2, 3, 3, 3, stride, pad};
    Grid x0 = oracle::random_grid(rng, 2, 7, 6);
    Grid w0 = oracle::random_grid(rng, 3, 2, 9);
    Grid b0 = oracle::random_grid(rng, 3, 1, 1);
    EXPECT_LT(check_unary(x0, [&](ad::Tape& t, const ad::Var& x) {
                return ad::conv2d(x, t.constant(w0), t.constant(b0), g);
              }), kTol);
    EXPECT_LT(check_unary(w0, [&](ad::Tape& t, const ad::Var& w) {
                return ad::conv2d(t.constant(x0), w, t.constant(b0), g);
              }), kTol);
    EXPECT_LT(check_unary(b0, [&](ad::Tape& t, const ad::Var& b) {
                return ad::conv2d(t.constant(x0), t.constant(w0), b, g);
              }), kTol);
  }
  const ntg::ConvGeometry pw{3, 2, 1, 1, 1, 0};
  Grid w1 = oracle::random_grid(rng, 2, 3, 1);
  EXPECT_LT(check_unary(oracle::random_grid(rng, 3, 4, 4), [&](ad::Tape& t, const ad::Var& x) {
              return ad::conv2d(x, t.constant(w1), ad::Var{}, pw);
            }), kTol);
}

TEST_F(Primitive, Gram) {
  EXPECT_LT(check_unary(oracle::random_grid(rng, 3, 4, 5), [](ad::Tape&, const ad::Var& x) { return ad::gram(x); }),
            kTol);
}

TEST_F(Primitive, CorruptedGramBackwardIsDetected) {
  ad::testing::corrupt_gram_backward() = true;
  const double err =
      check_unary(oracle::random_grid(rng, 3, 4, 5), [](ad::Tape&, const ad::Var& x) { return ad::gram(x); });
  ad::testing::corrupt_gram_backward() = false;
  EXPECT_GT(err, 1e-4);
}
