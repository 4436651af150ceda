#include <gtest/gtest.h>

#include <cmath>

#include "isonas/isonas.hpp"

using namespace isonas;

namespace {

Tensor4 random_image(std::size_t d, std::size_t n, Rng& rng) {
  Tensor4 h(Shape4{1, d, n, n});
  for (double& x : h.data()) x = rng.normal();
  return h;
}

// Direct sum over the centred window with explicit modular indexing.
double naive_patch_product(const Tensor4& h, const Filter& f, std::size_t i, std::size_t j) {
  const long n = static_cast<long>(h.shape().height), r = static_cast<long>(f.size);
  double s = 0.0;
  for (std::size_t c = 0; c < f.channels; ++c)
    for (long a = 0; a < r; ++a)
      for (long b = 0; b < r; ++b) {
        const long y = ((static_cast<long>(i) + a - r / 2) % n + n) % n;
        const long x = ((static_cast<long>(j) + b - r / 2) % n + n) % n;
        s += f(c, static_cast<std::size_t>(a), static_cast<std::size_t>(b)) *
             h(0, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      }
  return s;
}

std::vector<double> normal_samples(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(count);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST(CyclicConv, DeltaFilterSumsChannelsAtEveryPixel) {
  Rng rng(1);
  const Tensor4 h = random_image(3, 5, rng);
  Filter f(3, 3);
  for (std::size_t c = 0; c < 3; ++c) f(c, 1, 1) = 1.0;
  const auto out = cyclic_conv(h, f);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      EXPECT_NEAR(out[i * 5 + j], h(0, 0, i, j) + h(0, 1, i, j) + h(0, 2, i, j), 1e-12);
}

TEST(CyclicConv, ConstantImageGivesFilterSum) {
  Tensor4 h(Shape4{1, 2, 6, 6}, 2.0);
  Rng rng(2);
  const Filter f = gaussian_filter(2, 3, 1.0, rng);
  double sum = 0.0;
  for (double w : f.w) sum += w;
  for (double y : cyclic_conv(h, f)) EXPECT_NEAR(y, 2.0 * sum, 1e-12);
}

TEST(CyclicConv, MatchesNaiveWrapAroundSums) {
  Rng rng(3);
  for (std::size_t r : {1u, 3u}) {
    const Tensor4 h = random_image(2, 4, rng);
    const Filter f = gaussian_filter(2, r, 1.0, rng);
    const auto out = cyclic_conv(h, f);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[i * 4 + j], naive_patch_product(h, f, i, j), 1e-12);
  }
  EXPECT_THROW(cyclic_conv(random_image(2, 3, rng), Filter(2, 3)), DimensionError);
  EXPECT_THROW(cyclic_conv(random_image(1, 5, rng), Filter(2, 3)), DimensionError);
}

TEST(CyclicConv, ShiftingTheImageShiftsTheOutput) {
  Rng rng(4);
  const std::size_t n = 6;
  const Tensor4 h = random_image(2, n, rng);
  Tensor4 shifted(h.shape());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) shifted(0, c, (i + 2) % n, (j + 1) % n) = h(0, c, i, j);
  const Filter f = gaussian_filter(2, 3, 1.0, rng);
  const auto a = cyclic_conv(h, f), b = cyclic_conv(shifted, f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(b[((i + 2) % n) * n + (j + 1) % n], a[i * n + j], 1e-12);
}

TEST(PatchRadius, UnitOnesImageHasUnitRadius) {
  const Tensor4 ones(Shape4{1, 1, 4, 4}, 1.0);
  const double eps = 1e-3;
  EXPECT_NEAR(compute_R(ones, ones, 1.0 + eps, 1.0 + eps, eps, 1), 1.0, 1e-12);
  Tensor4 twice = ones;
  for (double& x : twice.data()) x *= 2.0;
  EXPECT_NEAR(compute_R(twice, ones, 1.0 + eps, 1.0 + eps, eps, 1), 2.0, 1e-12);
  EXPECT_THROW(compute_R(ones, ones, 0.5, 1.0, 0.5, 1), ConfigError);
}

TEST(PatchRadius, MatchesBruteForceOverAllPatches) {
  Rng rng(5);
  const Tensor4 h = random_image(2, 4, rng);
  double best = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      // Patch norm via the indicator filters of each window position.
      double s = 0.0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) {
            Filter e(2, 2);
            e(c, a, b) = 1.0;
            const double v = naive_patch_product(h, e, i, j);
            s += v * v;
          }
      best = std::max(best, std::sqrt(s));
    }
  EXPECT_NEAR(max_patch_norm(h, 2), best, 1e-12);
}

TEST(Orlicz, ConstantHasClosedFormNorm) {
  const std::vector<double> c(kMinOrliczSamples, 3.0);
  EXPECT_NEAR(estimate_orlicz(c, 2).norm, 3.0 / std::sqrt(std::log(2.0)), 1e-9);
  EXPECT_NEAR(estimate_orlicz(c, 1).norm, 3.0 / std::log(2.0), 1e-9);
  EXPECT_EQ(estimate_orlicz(std::vector<double>(kMinOrliczSamples, 0.0), 2).norm, 0.0);
}

TEST(Orlicz, StandardNormalIsNearItsClosedForm) {
  const auto x = normal_samples(200000, 6);
  EXPECT_NEAR(estimate_orlicz(x, 2).norm, std::sqrt(8.0 / 3.0), 0.05 * std::sqrt(8.0 / 3.0));
}

TEST(Orlicz, ExponentialHasSubexponentialNormTwo) {
  Rng rng(7);
  std::vector<double> x(200000);
  for (double& v : x) v = -std::log1p(-rng.uniform());
  EXPECT_NEAR(estimate_orlicz(x, 1).norm, 2.0, 0.1);
}

TEST(Orlicz, ProductOfSubgaussiansIsSubexponential) {
  const auto x = normal_samples(100000, 8), y = normal_samples(100000, 9);
  std::vector<double> xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xy[i] = x[i] * 2.0 * y[i];
  std::vector<double> y2(y);
  for (double& v : y2) v *= 2.0;
  EXPECT_LE(estimate_orlicz(xy, 1).norm, estimate_orlicz(x, 2).norm * estimate_orlicz(y2, 2).norm);
}

TEST(Orlicz, RejectsTooFewSamplesAndBadOrders) {
  EXPECT_THROW(estimate_orlicz(normal_samples(kMinOrliczSamples - 1, 1), 2), ConfigError);
  EXPECT_THROW(estimate_orlicz(normal_samples(kMinOrliczSamples, 1), 3), ConfigError);
  std::vector<double> heavy(kMinOrliczSamples, 1.0);
  heavy[0] = 1e20;
  EXPECT_THROW(estimate_orlicz(heavy, 2), ConvergenceError);
}

TEST(Orlicz, EstimateIsStableInTheSampleCount) {
  const auto big = normal_samples(100000, 10);
  const auto small = normal_samples(10000, 11);
  const double a = estimate_orlicz(big, 2).norm, b = estimate_orlicz(small, 2).norm;
  EXPECT_NEAR(b, a, 0.05 * a);
}

TEST(PatchBound, ZeroPatchHasZeroNorm) {
  Rng rng(12);
  const auto rep = verify_subgaussian_patch_bound(Filter(1, 3), 1.0, kMinOrliczSamples, rng);
  EXPECT_EQ(rep.gaussian_norm, 0.0);
  EXPECT_EQ(rep.orthogonal_norm, 0.0);
}

TEST(PatchBound, ConstantsAreBoundedForGaussianAndOrthogonalFilters) {
  Rng rng(13);
  Filter patch(2, 3);
  for (double& x : patch.w) x = rng.normal();
  const auto rep = verify_subgaussian_patch_bound(patch, 0.7, 20000, rng);
  // <F, x> ~ N(0, v^2 |x|^2) so its constant is sqrt(8/3).
  EXPECT_NEAR(rep.c0, std::sqrt(8.0 / 3.0), 0.1);
  EXPECT_GT(rep.c1, 0.0);
  EXPECT_LT(rep.c1, 4.0);
}

TEST(OrthogonalFilter, RowsAreOrthogonalWithMatchedEnergy) {
  Rng rng(14);
  const Filter f = orthogonalize_filter(gaussian_filter(2, 3, 1.0, rng), 0.5);
  const double scale2 = 0.25 * 6.0;
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t k = 0; k < 3; ++k) dot += f(c, a, k) * f(c, b, k);
      EXPECT_NEAR(dot, a == b ? scale2 : 0.0, 1e-10);
    }
}

TEST(Isotonic, PoolsAdjacentViolators) {
  const std::vector<double> y{0.9, 0.5, 0.7, 0.2, 0.3, 0.1};
  const auto fit = isotonic_nonincreasing(y);
  const std::vector<double> expected{0.9, 0.6, 0.6, 0.25, 0.25, 0.1};
  ASSERT_EQ(fit.size(), expected.size());
  for (std::size_t i = 0; i < fit.size(); ++i) EXPECT_NEAR(fit[i], expected[i], 1e-12);
  EXPECT_TRUE(isotonic_nonincreasing(std::vector<double>{}).empty());
}

TEST(Bound, DeltaDecaysExponentiallyAndSaturatesK) {
  const double d1 = theorem_delta(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2, 10);
  const double d2 = theorem_delta(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2, 20);
  // K = 0.5 / 4 = 0.125, min(K^2, K) = K^2.
  EXPECT_NEAR(d1, 8.0 * std::exp(-0.015625 * 10), 1e-12);
  EXPECT_NEAR(d2 / d1, std::exp(-0.015625 * 10), 1e-12);
  EXPECT_NEAR(theorem_delta(400.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2, 1), 8.0 * std::exp(-100.0), 1e-50);
}

TEST(DeviationExperiment, SmallRunProducesAConsistentReport) {
  TheoremConfig cfg;
  cfg.n = 5;
  cfg.d = 1;
  cfg.filter_counts = {4, 8, 16, 32};
  cfg.trials = 200;
  cfg.calibration_trials = 100;
  cfg.expectation_samples = 20000;
  cfg.gamma_grid = {1.0, 2.0};
  cfg.seed = 3;
  const ConcentrationReport rep = deviation_experiment(cfg);
  ASSERT_EQ(rep.rows.size(), 4u);
  EXPECT_GT(rep.eps, 0.0);
  EXPECT_GT(rep.R, 0.0);
  EXPECT_GT(rep.v_h, 0.0);
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    EXPECT_GE(rep.rows[i].p_hat, 0.0);
    EXPECT_LE(rep.rows[i].p_hat, 1.0);
    if (i) {
      EXPECT_LE(rep.rows[i].isotonic, rep.rows[i - 1].isotonic);
    }
  }
  EXPECT_LT(rep.rows.back().p_hat, rep.rows.front().p_hat);
  EXPECT_EQ(rep.gamma_curve.size(), 2u);
  const ConcentrationReport again = deviation_experiment(cfg);
  EXPECT_EQ(again.rows.back().p_hat, rep.rows.back().p_hat);
  cfg.filter_counts = {8, 4, 16};
  EXPECT_THROW(deviation_experiment(cfg), ConfigError);
}
