#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "isonas/isonas.hpp"

using namespace isonas;

TEST(GaussHermite, IntegratesGaussianMomentsExactly) {
  const GaussHermite& rule = standard_rule();
  EXPECT_NEAR(rule.expect([](double) { return 1.0; }), 1.0, 1e-13);
  EXPECT_NEAR(rule.expect([](double z) { return z * z; }), 1.0, 1e-12);
  EXPECT_NEAR(rule.expect([](double z) { return z * z * z * z; }), 3.0, 1e-11);
  EXPECT_NEAR(rule.expect([](double z) { return std::pow(z, 10); }), 945.0, 1e-7);
  // E[cos z] = exp(-1/2)
  EXPECT_NEAR(rule.expect([](double z) { return std::cos(z); }), std::exp(-0.5), 1e-13);
}

TEST(GaussHermite, AgreesWithMonteCarloForTanhSquared) {
  Rng rng(3);
  double mc = 0.0;
  const int n = 400000;
  for (int i = 0; i < n; ++i) {
    const double t = std::tanh(std::sqrt(0.7) * rng.normal());
    mc += t * t;
  }
  mc /= n;
  const double q = gaussian_expectation(0.7, [](double h) { return std::tanh(h) * std::tanh(h); });
  EXPECT_NEAR(q, mc, 3e-3);
}

TEST(VarianceMap, ReluFixedPointIsAnalytic) {
  // relu: v' = v_W v / 2 + v_b, so v* = v_b / (1 - v_W/2).
  VarianceMap map{1.0, 0.5, Activation::relu, 64};
  const FixedPoint fp = solve_fixed_point(map, 3.0);
  EXPECT_NEAR(fp.v_star, 1.0, 1e-8);
  EXPECT_NEAR(chi(map, fp.v_star), 0.5, 1e-10);
}

TEST(VarianceMap, DivergentMapReportsTheLastIterate) {
  VarianceMap map{3.0, 1.0, Activation::relu, 64};
  try {
    solve_fixed_point(map, 1.0, 1e-10, 50);
    FAIL();
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.last_iterate, 1.0);
  }
  VarianceMap too_few{1.0, 0.0, Activation::tanh, 8};
  EXPECT_THROW(too_few.validate(), ConfigError);
}

TEST(CriticalPoint, IsAFixedPointWithUnitChi) {
  for (double v : {0.025, 0.3, 1.0}) {
    const CriticalPoint cp = critical_point(Activation::tanh, v);
    VarianceMap map{cp.weight_variance, cp.bias_variance, Activation::tanh, 64};
    EXPECT_NEAR(variance_step(v, map), v, 1e-12);
    EXPECT_NEAR(chi(map, v), 1.0, 1e-12);
  }
  const CriticalPoint cp = critical_point(Activation::tanh, 0.025);
  EXPECT_NEAR(cp.gain, 1.023856, 1e-6);
  EXPECT_NEAR(estimate_p_linear(Activation::tanh, 0.025), 0.953942, 1e-6);
  EXPECT_NEAR(estimate_p_linear(Activation::relu, 1.0), 0.5, 1e-12);
}

TEST(SpectralStats, OrthogonalMatrixHasZeroVariance) {
  Rng rng(2);
  Matrix q = random_orthogonal(20, rng);
  const SpectralStats s = spectral_stats(q);
  EXPECT_NEAR(s.phi, 1.0, 1e-12);
  EXPECT_NEAR(s.trace_var, 0.0, 1e-12);
  EXPECT_TRUE(check_isometry(s).pass);
  Matrix d = Matrix::identity(4);
  d(0, 0) = 2.0;
  const SpectralStats t = spectral_stats(d);  // eigenvalues of JJ^T: 4,1,1,1
  EXPECT_NEAR(t.phi, 7.0 / 4.0, 1e-12);
  EXPECT_NEAR(t.phi2, 19.0 / 4.0, 1e-12);
  EXPECT_FALSE(check_isometry(t).pass);
}

TEST(GaussianMoments, ClosedForm) {
  const GaussianMoments g = gaussian_moments(1.0, 1.0, 3);
  EXPECT_DOUBLE_EQ(g.m1, 1.0);
  EXPECT_DOUBLE_EQ(g.variance, 3.0);
  EXPECT_THROW(gaussian_moments(1.0, 0.0, 3), ConfigError);
}

TEST(DeepProducts, GaussianSpreadGrowsWithDepthOrthogonalStaysFlat) {
  const CriticalPoint cp = critical_point(Activation::tanh, 0.025);
  Rng rng(4);
  const double g4 = deep_product_moments(false, Activation::tanh, 96, 4, cp, rng).normalized_var();
  const double g12 = deep_product_moments(false, Activation::tanh, 96, 12, cp, rng).normalized_var();
  const double o12 = deep_product_moments(true, Activation::tanh, 96, 12, cp, rng).normalized_var();
  EXPECT_GT(g12, 2.0 * g4);
  EXPECT_LT(o12, 0.2);
}

TEST(Reports, PhaseDiagramAndSpectrumCsvSchemas) {
  std::ostringstream os;
  const std::vector<double> vw{1.0, 2.0}, vb{0.0, 0.1};
  write_phase_diagram_csv(os, Activation::tanh, vw, vb);
  std::istringstream in(os.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "weight_variance,bias_variance,v_star,chi");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 4);
}
