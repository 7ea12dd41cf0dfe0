#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "ntg/metrics.hpp"
#include "oracles.hpp"

using ntg::Grid;
namespace m = ntg::metrics;

namespace {

Grid random_8bit(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  std::uniform_int_distribution<int> u(0, 255);
  Grid g(1, h, w);
  for (double& v : g.values()) v = u(rng);
  return g;
}

Grid from_values(std::size_t h, std::size_t w, std::initializer_list<double> v) {
  Grid g(1, h, w);
  std::copy(v.begin(), v.end(), g.values().begin());
  return g;
}

}  // namespace

TEST(Ssim, SelfSimilarityIsOne) {
  std::mt19937_64 rng(1);
  for (std::size_t n : {8, 11, 16, 32}) {
    const Grid x = random_8bit(rng, n, n);
    EXPECT_NEAR(m::ssim(x, x), 1.0, 1e-9);
  }
}

TEST(Ssim, ConstantImagesClosedForm) {
  const double c1 = 6.5025;
  const double expected = c1 / (255.0 * 255.0 + c1);
  EXPECT_NEAR(expected, 9.9990e-5, 1e-8);
  EXPECT_NEAR(m::ssim(Grid(1, 16, 16, 0.0), Grid(1, 16, 16, 255.0)), expected, 1e-8);
}

TEST(Ssim, SymmetricAndBounded) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    const Grid a = random_8bit(rng, 16, 16), b = random_8bit(rng, 16, 16);
    const double s = m::ssim(a, b);
    EXPECT_DOUBLE_EQ(s, m::ssim(b, a));
    EXPECT_LE(s, 1.0);
    EXPECT_GE(s, -1.0);
  }
}

TEST(Ssim, MatchesSingleWindowFormulaOnElevenByEleven) {
  std::mt19937_64 rng(3);
  const Grid a = random_8bit(rng, 11, 11), b = random_8bit(rng, 11, 11);
  std::vector<double> w(121);
  double sum = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) sum += w[y * 11 + x] = std::exp(-((x - 5) * (x - 5) + (y - 5) * (y - 5)) / 4.5);
  double ma = 0, mb = 0;
  for (int i = 0; i < 121; ++i) {
    w[i] /= sum;
    ma += w[i] * a[i];
    mb += w[i] * b[i];
  }
  double va = 0, vb = 0, cov = 0;
  for (int i = 0; i < 121; ++i) {
    va += w[i] * (a[i] - ma) * (a[i] - ma);
    vb += w[i] * (b[i] - mb) * (b[i] - mb);
    cov += w[i] * (a[i] - ma) * (b[i] - mb);
  }
  const double c1 = 6.5025, c2 = 58.5225;
  const double expected = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  EXPECT_NEAR(m::ssim(a, b), expected, 1e-10);
}

TEST(Ssim, RejectsMismatchAndMultiChannel) {
  EXPECT_THROW(m::ssim(Grid(1, 8, 8), Grid(1, 8, 9)), ntg::ShapeError);
  EXPECT_THROW(m::ssim(Grid(2, 8, 8), Grid(2, 8, 8)), ntg::ShapeError);
}

TEST(Mse, HandCases) {
  std::mt19937_64 rng(4);
  const Grid x = random_8bit(rng, 5, 5);
  EXPECT_EQ(m::mse(x, x), 0.0);
  EXPECT_EQ(m::mse(Grid(1, 2, 2, 0.0), Grid(1, 2, 2, 1.0)), 1.0);
  EXPECT_EQ(m::mse(from_values(2, 2, {1, 2, 3, 4}), from_values(2, 2, {1, 2, 3, 0})), 4.0);
  EXPECT_THROW(m::mse(Grid(1, 2, 2), Grid(1, 2, 3)), ntg::ShapeError);
}

TEST(Psnr, ReferenceValues) {
  EXPECT_NEAR(m::psnr_from_mse(255.0 * 255.0), 0.0, 1e-12);
  EXPECT_NEAR(m::psnr_from_mse(1.0), 48.1308, 1e-3);
  EXPECT_NEAR(m::psnr_from_mse(1.0), 20.0 * std::log10(255.0), 1e-12);
  const Grid x(1, 3, 3, 7.0);
  EXPECT_EQ(m::psnr(x, x), std::numeric_limits<double>::infinity());
}

TEST(Psnr, StrictlyDecreasingInMse) {
  double prev = m::psnr_from_mse(1e-6);
  for (double e = 1e-5; e < 1e6; e *= 1.7) {
    const double p = m::psnr_from_mse(e);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(HistogramCorrelation, IdenticalImagesExactlyOne) {
  std::mt19937_64 rng(5);
  const Grid a = random_8bit(rng, 16, 16);
  EXPECT_EQ(m::histogram_correlation(a, a), 1.0);
  const Grid flat(1, 4, 4, 9.0);
  EXPECT_EQ(m::histogram_correlation(flat, flat), 1.0);
}

TEST(HistogramCorrelation, AffineCountTransformGivesOne) {
  std::mt19937_64 rng(6);
  const Grid a = random_8bit(rng, 8, 8);
  // Every pixel repeated three times: counts scale by 3.
  Grid b(1, 8, 24);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t r = 0; r < 3; ++r) b[3 * i + r] = a[i];
  EXPECT_NEAR(m::histogram_correlation(a, b), 1.0, 1e-12);
}

TEST(HistogramCorrelation, MatchesPearsonOracle) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 10; ++t) {
    const Grid a = random_8bit(rng, 16, 16), b = random_8bit(rng, 16, 16);
    std::vector<double> ha(256, 0), hb(256, 0);
    for (double v : a.values()) ha[static_cast<int>(v)] += 1;
    for (double v : b.values()) hb[static_cast<int>(v)] += 1;
    const double ma = 1.0, mb = 1.0;  // 256 pixels over 256 bins
    double sab = 0, saa = 0, sbb = 0;
    for (int k = 0; k < 256; ++k) {
      sab += (ha[k] - ma) * (hb[k] - mb);
      saa += (ha[k] - ma) * (ha[k] - ma);
      sbb += (hb[k] - mb) * (hb[k] - mb);
    }
    EXPECT_NEAR(m::histogram_correlation(a, b), sab / std::sqrt(saa * sbb), 1e-12);
  }
}

TEST(HistogramCorrelation, FlatHistogramCases) {
  // Every intensity exactly once: all 256 bins hold one count.
  Grid ramp(1, 16, 16);
  for (std::size_t i = 0; i < 256; ++i) ramp[i] = static_cast<double>(i);
  Grid reversed = ramp;
  std::reverse(reversed.values().begin(), reversed.values().end());
  std::mt19937_64 rng(8);
  EXPECT_EQ(m::histogram_correlation(ramp, random_8bit(rng, 16, 16)), 0.0);
  EXPECT_EQ(m::histogram_correlation(ramp, reversed), 1.0);
}

TEST(HistogramCorrelation, TopValueFallsInLastBin) {
  const auto h = m::histogram(from_values(1, 3, {255, 254.5, 0}));
  EXPECT_EQ(h[255], 1.0);
  EXPECT_EQ(h[254], 1.0);
  EXPECT_EQ(h[0], 1.0);
}

TEST(PointwiseMetrics, InvariantUnderSharedPermutation) {
  std::mt19937_64 rng(9);
  const Grid a = random_8bit(rng, 8, 8), b = random_8bit(rng, 8, 8);
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Grid pa(1, 8, 8), pb(1, 8, 8);
  for (std::size_t i = 0; i < 64; ++i) {
    pa[i] = a[perm[i]];
    pb[i] = b[perm[i]];
  }
  EXPECT_NEAR(m::mse(a, b), m::mse(pa, pb), 1e-9);
  EXPECT_NEAR(m::psnr(a, b), m::psnr(pa, pb), 1e-9);
  EXPECT_EQ(m::histogram_correlation(a, b), m::histogram_correlation(pa, pb));
}

TEST(To8bit, ClampsScalesAndRoundsHalfToEven) {
  const Grid g = m::to_8bit(from_values(1, 5, {-0.2, 0.0, 0.5, 1.0, 1.7}));
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 128.0);  // 127.5 -> 128
  EXPECT_EQ(g[3], 255.0);
  EXPECT_EQ(g[4], 255.0);
  EXPECT_EQ(m::to_8bit(from_values(1, 1, {2.5 / 255.0}))[0], 2.0);
}

TEST(Summarize, HandQuartiles) {
  const auto s = m::summarize({1, 2, 3, 4, 100});
  EXPECT_DOUBLE_EQ(s.mean, 22.0);
  EXPECT_DOUBLE_EQ(s.median, 3.0);
  EXPECT_DOUBLE_EQ(s.q1, 2.0);
  EXPECT_DOUBLE_EQ(s.q3, 4.0);
  ASSERT_EQ(s.outliers.size(), 1u);
  EXPECT_EQ(s.outliers[0], 4u);
}

TEST(Summarize, EvenCountUsesMidpoint) {
  const auto s = m::summarize({4, 1, 3, 2});
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.q1, 1.75);
  EXPECT_DOUBLE_EQ(s.q3, 3.25);
}

TEST(Summarize, SingleRow) {
  const auto s = m::summarize({0.37});
  EXPECT_EQ(s.mean, 0.37);
  EXPECT_EQ(s.median, 0.37);
  EXPECT_TRUE(s.outliers.empty());
}

TEST(Summarize, PermutationInvariant) {
  std::mt19937_64 rng(10);
  std::vector<double> v = oracle::random_vector(rng, 37, 0, 50);
  v.push_back(400);
  const auto a = m::summarize(v);
  std::shuffle(v.begin(), v.end(), rng);
  const auto b = m::summarize(v);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.median, b.median);
  EXPECT_EQ(a.q1, b.q1);
  EXPECT_EQ(a.q3, b.q3);
  ASSERT_EQ(b.outliers.size(), 1u);
  EXPECT_EQ(v[b.outliers[0]], 400);
}

TEST(Summarize, EmptyRejected) { EXPECT_THROW(m::summarize({}), ntg::ArgumentError); }

TEST(Evaluate, RowCombinesMetrics) {
  std::mt19937_64 rng(11);
  const Grid a = random_8bit(rng, 12, 12), b = random_8bit(rng, 12, 12);
  const auto r = m::evaluate("img7", a, b);
  EXPECT_EQ(r.id, "img7");
  EXPECT_EQ(r.mse, m::mse(a, b));
  EXPECT_EQ(r.psnr, m::psnr(a, b));
  EXPECT_EQ(r.ssim, m::ssim(a, b));
  EXPECT_EQ(r.histcorr, m::histogram_correlation(a, b));
}

TEST(Summarize, InfinitePsnrColumn) {
  const double inf = std::numeric_limits<double>::infinity();
  const auto all = m::summarize({inf, inf, inf});
  EXPECT_EQ(all.median, inf);
  EXPECT_EQ(all.q1, inf);
  EXPECT_EQ(all.q3, inf);
  const auto mixed = m::summarize({20.0, 30.0, inf});
  EXPECT_EQ(mixed.median, 30.0);
  EXPECT_EQ(mixed.q1, 25.0);
  EXPECT_EQ(mixed.q3, inf);
}
