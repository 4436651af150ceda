#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "isonas/isonas.hpp"

using namespace isonas;

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

// Circulant operator of a stride-1, circularly padded conv on an n x n map.
Eigen::MatrixXd conv_operator(const LayerParams& p, std::size_t n) {
  const BlockFn f = [&](Tape& t, Node in) { return t.conv2d(in, p, ConvOptions{1, Padding::circular}); };
  return to_eigen(jacobian_of(f, Tensor4(Shape4{1, p.in_channels, n, n})));
}

}  // namespace

TEST(Orthogonalize, TallSquareAndWideMatricesMatchHouseholderQr) {
  Rng rng(1);
  for (auto [r, c] : {std::pair{7ul, 3ul}, {5ul, 5ul}, {3ul, 8ul}}) {
    const Matrix f = gaussian_matrix(r, c, 1.0, rng);
    const OrthogonalFactor of = orthogonalize_triangular(f);
    const Eigen::MatrixXd q = to_eigen(of.q);
    // Same column (or row) space as the Householder factor, up to column signs.
    const Eigen::MatrixXd e = to_eigen(f);
    if (r >= c) {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(e);
      const Eigen::MatrixXd ref = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
      EXPECT_LT((q.transpose() * q - Eigen::MatrixXd::Identity(c, c)).cwiseAbs().maxCoeff(), 1e-12);
      const Eigen::MatrixXd overlap = (ref.transpose() * q).cwiseAbs();
      EXPECT_LT((overlap - Eigen::MatrixXd::Identity(c, c)).cwiseAbs().maxCoeff(), 1e-10);
      // Q = F Winv with Winv upper triangular.
      EXPECT_LT((e * to_eigen(of.winv) - q).cwiseAbs().maxCoeff(), 1e-10);
    } else {
      EXPECT_TRUE(of.rows_orthonormal);
      EXPECT_LT((q * q.transpose() - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-12);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(e.transpose());
      const Eigen::MatrixXd ref = qr.householderQ() * Eigen::MatrixXd::Identity(c, r);
      const Eigen::MatrixXd overlap = (ref.transpose() * q.transpose()).cwiseAbs();
      EXPECT_LT((overlap - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
}

TEST(Orthogonalize, RankDeficientInputAsksForANewSeed) {
  Matrix f(4, 2);
  for (std::size_t i = 0; i < 4; ++i) f(i, 0) = f(i, 1) = static_cast<double>(i + 1);
  try {
    orthogonalize_triangular(f);
    FAIL();
  } catch (const RankDeficientError& e) {
    EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
  }
}

TEST(InitConvOrthogonal, FlattenedBankIsScaledOrthogonal) {
  InitSpec spec;
  spec.seed = 3;
  spec.gain = 1.7;
  const LayerParams p = init_conv_orthogonal(spec, 6, 4, 3);
  EXPECT_LT(orthogonality_defect(p, 1.7), 1e-10);
  // 1x1 square case: W W^T = gain^2 I exactly.
  const LayerParams q = init_conv_orthogonal(spec, 5, 5, 1);
  const Eigen::MatrixXd w = to_eigen(flattened_group(q, 0));
  EXPECT_LT((w * w.transpose() - 1.7 * 1.7 * Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(InitLayer, DeltaLayoutUsesOnlyTheCentreTap) {
  LayerParams p = LayerParams::conv("dw", 6, 6, 5, 6, true);
  InitSpec spec;
  spec.gain = 1.2;
  spec.bias_variance = 0.0;
  init_layer(p, spec, ConvLayout::delta);
  for (std::size_t o = 0; o < 6; ++o)
    for (std::size_t ky = 0; ky < 5; ++ky)
      for (std::size_t kx = 0; kx < 5; ++kx) {
        const double v = p.w(o, 0, ky, kx);
        if (ky == 2 && kx == 2) {
          EXPECT_NEAR(std::abs(v), 1.2, 1e-12);
        } else {
          EXPECT_EQ(v, 0.0);
        }
      }
  for (double b : p.bias) EXPECT_EQ(b, 0.0);
  LayerParams tall = LayerParams::conv("tall", 8, 4, 3);
  EXPECT_THROW(init_layer(tall, spec, ConvLayout::delta), DimensionError);
}

TEST(InitLayer, OrthogonalKernelIsAnExactlyOrthogonalCircularConvolution) {
  for (std::size_t k : {3ul, 5ul}) {
    LayerParams p = LayerParams::conv("c", 4, 4, k);
    InitSpec spec;
    spec.seed = 11 + k;
    spec.gain = 0.8;
    init_layer(p, spec, ConvLayout::orthogonal_kernel);
    const Eigen::MatrixXd a = conv_operator(p, 6);
    EXPECT_LT((a.transpose() * a - 0.64 * Eigen::MatrixXd::Identity(a.cols(), a.cols())).cwiseAbs().maxCoeff(), 1e-10)
        << "k = " << k;
    // Singular values from an independent SVD are all equal to the gain.
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    EXPECT_NEAR(svd.singularValues().maxCoeff(), 0.8, 1e-10);
    EXPECT_NEAR(svd.singularValues().minCoeff(), 0.8, 1e-10);
  }
  LayerParams bad = LayerParams::conv("c", 4, 2, 3);
  EXPECT_THROW(init_layer(bad, InitSpec{}, ConvLayout::orthogonal_kernel), DimensionError);
}

TEST(InitLayer, GaussianVarianceAndIdentity) {
  LayerParams p = LayerParams::conv("c", 64, 32, 3);
  InitSpec spec;
  spec.scheme = InitScheme::gaussian;
  spec.weight_variance = 2.0;
  spec.seed = 5;
  init_layer(p, spec);
  double sq = 0.0;
  for (double w : p.weights) sq += w * w;
  const double var = sq / static_cast<double>(p.weights.size());
  EXPECT_NEAR(var * p.fan_in(), 2.0, 0.1);

  LayerParams id = LayerParams::conv("id", 3, 3, 3);
  spec.scheme = InitScheme::identity;
  spec.gain = 1.0;
  init_layer(id, spec);
  Tape t;
  Tensor4 x(Shape4{1, 3, 4, 4});
  Rng rng(1);
  for (double& v : x.data()) v = rng.normal();
  const Tensor4& y = t.value(t.conv2d(t.input(x), id));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-15);
}

TEST(InitSpec, RejectsInvalidValues) {
  InitSpec spec;
  spec.gain = 0.0;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_THROW(parse_init_scheme("xavier"), ConfigError);
  EXPECT_EQ(parse_init_scheme("gaussian"), InitScheme::gaussian);
}

TEST(CalibrateGain, MatchesDirectQuadratureOfTheDerivative) {
  // tanh'(x)^2 = sech^4(x); at v* -> 0 the gain tends to 1.
  EXPECT_NEAR(calibrate_gain(Activation::tanh, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(calibrate_gain(Activation::relu, 1.0), std::sqrt(2.0), 1e-6);
  EXPECT_NEAR(calibrate_gain(Activation::tanh, 0.025), 1.023856, 1e-6);
}
