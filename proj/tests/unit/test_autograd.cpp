#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "isonas/isonas.hpp"

using namespace isonas;

namespace {

Tensor4 random_tensor(Shape4 s, Rng& rng, double scale = 1.0) {
  Tensor4 t(s);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

void randomize(LayerParams& p, Rng& rng, double scale = 0.5) {
  for (double& w : p.weights) w = scale * rng.normal();
  for (double& b : p.bias) b = 0.1 * rng.normal();
}

// Naive grouped convolution (zero or circular padding) used as an oracle.
Tensor4 naive_conv(const Tensor4& x, const LayerParams& p, std::size_t stride, bool circular) {
  const auto s = x.shape();
  const std::size_t k = p.kernel, pad = k / 2;
  const std::size_t oh = (s.height - 1) / stride + 1, ow = (s.width - 1) / stride + 1;
  Tensor4 y(Shape4{s.batch, p.out_channels, oh, ow});
  const std::size_t ipg = p.in_per_group(), opg = p.out_per_group();
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t o = 0; o < p.out_channels; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = p.has_bias() ? p.bias[o] : 0.0;
          const std::size_t g = o / opg;
          for (std::size_t c = 0; c < ipg; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                long yy = static_cast<long>(i * stride + ky) - static_cast<long>(pad);
                long xx = static_cast<long>(j * stride + kx) - static_cast<long>(pad);
                if (circular) {
                  yy = (yy % static_cast<long>(s.height) + static_cast<long>(s.height)) % static_cast<long>(s.height);
                  xx = (xx % static_cast<long>(s.width) + static_cast<long>(s.width)) % static_cast<long>(s.width);
                } else if (yy < 0 || xx < 0 || yy >= static_cast<long>(s.height) || xx >= static_cast<long>(s.width)) {
                  continue;
                }
                acc += p.w(o, c, ky, kx) * x(b, g * ipg + c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
              }
          y(b, o, i, j) = acc;
        }
  return y;
}

double loss_of(const Tensor4& y, const Tensor4& w) { return y.dot(w); }

}  // namespace

TEST(Tensor, IndexingAndSlicing) {
  Tensor4 t(Shape4{2, 3, 2, 2});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  EXPECT_EQ(t(1, 2, 1, 0), 22.0);
  const Tensor4 s = t.slice_batch(1, 2);
  EXPECT_EQ(s.shape().batch, 1u);
  EXPECT_EQ(s(0, 0, 0, 0), 12.0);
  EXPECT_THROW(Tensor4(Shape4{1, 1, 2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(Conv, MatchesNaiveLoopsForAllPaddingsStridesAndGroups) {
  Rng rng(1);
  for (bool circular : {false, true})
    for (std::size_t stride : {1u, 2u})
      for (std::size_t groups : {1u, 2u, 4u}) {
        LayerParams p = LayerParams::conv("c", 4, 4, 3, groups, true);
        randomize(p, rng);
        const Tensor4 x = random_tensor(Shape4{2, 4, 5, 5}, rng);
        Tape tape;
        const Node y = tape.conv2d(tape.input(x), p, ConvOptions{stride, circular ? Padding::circular : Padding::zero});
        const Tensor4 ref = naive_conv(x, p, stride, circular);
        ASSERT_EQ(tape.value(y).shape(), ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(tape.value(y)[i], ref[i], 1e-12);
      }
}

TEST(Conv, RejectsChannelMismatch) {
  LayerParams p = LayerParams::conv("c", 4, 3, 3);
  Tape tape;
  EXPECT_THROW(tape.conv2d(tape.input(Tensor4(Shape4{1, 2, 4, 4})), p), DimensionError);
}

// Every op's reverse sweep agrees with central differences of the forward pass.
TEST(Autograd, InputGradientsMatchFiniteDifferences) {
  Rng rng(2);
  LayerParams c1 = LayerParams::conv("c1", 4, 2, 3, 1, true);
  LayerParams dw = LayerParams::conv("dw", 4, 4, 3, 4, true);
  LayerParams fc = LayerParams::dense("fc", 3, 4, true);
  randomize(c1, rng);
  randomize(dw, rng);
  randomize(fc, rng);
  BNParams bn("bn", 4);
  for (double& g : bn.gamma) g = 1.0 + 0.3 * rng.normal();
  const Tensor4 x = random_tensor(Shape4{3, 2, 4, 4}, rng);
  const Tensor4 w = random_tensor(Shape4{3, 3, 1, 1}, rng);

  auto build = [&](Tape& t, Node in) {
    Node h = t.conv2d(in, c1, ConvOptions{1, Padding::zero});
    h = t.batchnorm(h, bn, BNMode::train);
    h = t.activation(h, Activation::tanh);
    Node a = t.slice_channels(h, 0, 2), b = t.slice_channels(h, 2, 4);
    h = t.channel_shuffle(t.concat_channels(b, t.scale(a, 0.7)), 2);
    h = t.add(h, t.conv2d(h, dw, ConvOptions{1, Padding::circular}));
    h = t.avg_pool(h, 2);
    h = t.global_avg_pool(h);
    return t.dense(h, fc);
  };
  Tape tape;
  const Node in = tape.input(x);
  const Node out = build(tape, in);
  const Tensor4 g = tape.vjp(out, w, in);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); i += 5) {
    Tensor4 xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    Tape tp, tm;
    const double lp = loss_of(tp.value(build(tp, tp.input(xp))), w);
    const double lm = loss_of(tm.value(build(tm, tm.input(xm))), w);
    EXPECT_NEAR(g[i], (lp - lm) / (2 * h), 1e-6 * std::max(1.0, std::abs(g[i])));
  }
}

TEST(Autograd, BatchNormParameterGradientsMatchFiniteDifferences) {
  Rng rng(3);
  LayerParams c = LayerParams::conv("c", 3, 2, 3);
  randomize(c, rng);
  BNParams bn("bn", 3);
  for (double& v : bn.gamma) v = 1.0 + 0.2 * rng.normal();
  for (double& v : bn.beta) v = 0.2 * rng.normal();
  const Tensor4 x = random_tensor(Shape4{4, 2, 3, 3}, rng);
  const Tensor4 w = random_tensor(Shape4{4, 3, 3, 3}, rng);
  auto loss = [&]() {
    Tape t;
    Node h = t.batchnorm(t.conv2d(t.input(x), c), bn, BNMode::train);
    return loss_of(t.value(t.activation(h, Activation::tanh)), w);
  };
  Tape tape;
  Node h = tape.activation(tape.batchnorm(tape.conv2d(tape.input(x), c), bn, BNMode::train), Activation::tanh);
  const GradientSet gs = tape.backward(h, w, GradScope::bn_only);
  const BNGrad* g = gs.find_bn(&bn);
  ASSERT_NE(g, nullptr);
  EXPECT_EQ(gs.find_layer(&c), nullptr);
  const double eps = 1e-6;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (auto* vec : {&bn.gamma, &bn.beta}) {
      const double keep = (*vec)[ch];
      (*vec)[ch] = keep + eps;
      const double lp = loss();
      (*vec)[ch] = keep - eps;
      const double lm = loss();
      (*vec)[ch] = keep;
      const double fd = (lp - lm) / (2 * eps);
      const double an = vec == &bn.gamma ? g->gamma[ch] : g->beta[ch];
      EXPECT_NEAR(an, fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Autograd, WeightGradientsOnlyForUnfrozenLayersInFullScope) {
  Rng rng(4);
  LayerParams c = LayerParams::conv("c", 2, 2, 3, 1, true);
  randomize(c, rng);
  const Tensor4 x = random_tensor(Shape4{2, 2, 4, 4}, rng);
  const Tensor4 w = random_tensor(Shape4{2, 2, 4, 4}, rng);
  {
    Tape t;
    const Node y = t.conv2d(t.input(x), c);
    EXPECT_EQ(t.backward(y, w, GradScope::all).layer_count(), 0u);  // frozen
  }
  c.frozen = false;
  Tape t;
  const Node y = t.conv2d(t.input(x), c);
  const GradientSet gs = t.backward(y, w, GradScope::all);
  const LayerGrad* g = gs.find_layer(&c);
  ASSERT_NE(g, nullptr);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < c.weights.size(); i += 3) {
    const double keep = c.weights[i];
    c.weights[i] = keep + eps;
    Tape tp;
    const double lp = loss_of(tp.value(tp.conv2d(tp.input(x), c)), w);
    c.weights[i] = keep - eps;
    Tape tm;
    const double lm = loss_of(tm.value(tm.conv2d(tm.input(x), c)), w);
    c.weights[i] = keep;
    EXPECT_NEAR(g->weights[i], (lp - lm) / (2 * eps), 1e-6);
  }
  double bias_grad = 0.0;
  for (std::size_t b = 0; b < 2; ++b)
    for (double v : w.plane(b, 0)) bias_grad += v;
  EXPECT_NEAR(g->bias[0], bias_grad, 1e-10);
}

TEST(Autograd, TangentSweepIsTheAdjointOfTheReverseSweep) {
  Rng rng(5);
  LayerParams c = LayerParams::conv("c", 4, 4, 3);
  randomize(c, rng);
  BNParams bn("bn", 4);
  const Tensor4 x = random_tensor(Shape4{2, 4, 4, 4}, rng);
  Tape tape;
  const Node in = tape.input(x);
  const Node out = tape.activation(tape.batchnorm(tape.conv2d(in, c, ConvOptions{2, Padding::circular}), bn, BNMode::train),
                                   Activation::tanh);
  const Tensor4 u = random_tensor(x.shape(), rng);
  const Tensor4 v = random_tensor(tape.value(out).shape(), rng);
  // <v, J u> = <J^T v, u>
  EXPECT_NEAR(v.dot(tape.jvp(out, in, u)), tape.vjp(out, v, in).dot(u), 1e-10);
}

TEST(Autograd, NonFiniteValuesNameTheLayer) {
  LayerParams c = LayerParams::conv("bad_conv", 1, 1, 1);
  c.weights[0] = std::numeric_limits<double>::infinity();
  Tape tape;
  try {
    tape.conv2d(tape.input(Tensor4(Shape4{1, 1, 2, 2}, 1.0)), c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("bad_conv"), std::string::npos);
  }
}

TEST(Autograd, BackwardOnEmptyTapeFails) {
  Tape tape;
  EXPECT_THROW(backward_bn_only(tape, Tensor4(Shape4{1, 1, 1, 1})), Error);
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStatistics) {
  Rng rng(6);
  BNParams bn("bn", 2);
  bn.momentum = 1.0;
  const Tensor4 x = random_tensor(Shape4{8, 2, 3, 3}, rng, 3.0);
  Tape t;
  const Tensor4& y = t.value(t.batchnorm(t.input(x), bn, BNMode::train));
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, sq = 0, n = 0;
    for (std::size_t b = 0; b < 8; ++b)
      for (double v : y.plane(b, c)) {
        s += v;
        sq += v * v;
        ++n;
      }
    EXPECT_NEAR(s / n, 0.0, 1e-12);
    EXPECT_NEAR(sq / n, 1.0, 1e-3);
  }
  // Eval mode with the stored statistics reproduces the train-mode output.
  Tape e;
  const Tensor4& ye = e.value(e.batchnorm(e.input(x), bn, BNMode::eval));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(ye[i], y[i], 1e-12);
  Tape single;
  EXPECT_THROW(single.batchnorm(single.input(x.slice_batch(0, 1)), bn, BNMode::train), Error);
}

TEST(Loss, SoftmaxCrossEntropyGradientMatchesFiniteDifferences) {
  Rng rng(7);
  const Tensor4 logits = random_tensor(Shape4{3, 4, 1, 1}, rng);
  const std::vector<int> labels{0, 3, 1};
  const LossResult r = softmax_cross_entropy(logits, labels);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Tensor4 p = logits, m = logits;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    const double fd = (softmax_cross_entropy(p, labels).loss - softmax_cross_entropy(m, labels).loss) / 2e-6;
    EXPECT_NEAR(r.grad[i], fd, 1e-7);
  }
  EXPECT_THROW(softmax_cross_entropy(logits, std::vector<int>{0}), DimensionError);
}

TEST(Jacobian, DenseJacobianMatchesColumnsOfTheTangentMap) {
  Rng rng(8);
  LayerParams c = LayerParams::conv("c", 2, 2, 3);
  randomize(c, rng);
  const Tensor4 x = random_tensor(Shape4{1, 2, 3, 3}, rng);
  const BlockFn f = [&](Tape& t, Node in) { return t.activation(t.conv2d(in, c), Activation::tanh); };
  const Matrix j = jacobian_of(f, x);
  ASSERT_EQ(j.rows(), 18u);
  const double h = 1e-6;
  for (std::size_t col = 0; col < 18; ++col) {
    Tensor4 xp = x, xm = x;
    xp[col] += h;
    xm[col] -= h;
    Tape tp, tm;
    const Tensor4 yp = tp.value(f(tp, tp.input(xp))), ym = tm.value(f(tm, tm.input(xm)));
    for (std::size_t r = 0; r < 18; ++r) EXPECT_NEAR(j(r, col), (yp[r] - ym[r]) / (2 * h), 1e-7);
  }
}

TEST(Jacobian, StochasticMomentsAgreeWithDenseMoments) {
  Rng rng(9);
  LayerParams c = LayerParams::conv("c", 4, 4, 3);
  randomize(c, rng, 0.3);
  const Tensor4 x = random_tensor(Shape4{1, 4, 4, 4}, rng);
  const BlockFn f = [&](Tape& t, Node in) { return t.activation(t.conv2d(in, c), Activation::tanh); };
  const SpectralStats exact = spectral_stats(jacobian_of(f, x));
  Rng probe(10);
  const MomentEstimate est = estimate_jjt_moments(f, x, 400, probe);
  EXPECT_NEAR(est.phi, exact.phi, 4 * est.phi_stderr);
  EXPECT_NEAR(est.phi2, exact.phi2, 4 * est.phi2_stderr);
}

TEST(Jacobian, DenseLimitPointsToTheEstimator) {
  LayerParams c = LayerParams::conv("c", 80, 80, 1);
  const BlockFn f = [&](Tape& t, Node in) { return t.conv2d(in, c); };
  try {
    jacobian_of(f, Tensor4(Shape4{1, 80, 8, 8}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("estimate_jjt_moments"), std::string::npos);
  }
}
