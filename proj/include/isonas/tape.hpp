#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "isonas/conv.hpp"
#include "isonas/errors.hpp"
#include "isonas/layers.hpp"
#include "isonas/tensor.hpp"

namespace isonas {

enum class BNMode { train, eval };

/// Which parameter gradients a backward pass produces.
enum class GradScope {
  none,     // input gradients only (vector-Jacobian products)
  bn_only,  // trainable BN gamma/beta; conv and dense weights get nothing
  all,      // trainable BN plus every unfrozen conv/dense layer
};

struct LayerGrad {
  std::vector<double> weights;
  std::vector<double> bias;
};

struct BNGrad {
  std::vector<double> gamma;
  std::vector<double> beta;
};

/// Parameter gradients keyed by the parameter object they belong to.
class GradientSet {
 public:
  BNGrad& bn(const BNParams* p) {
    auto& g = bn_[p];
    if (g.gamma.empty()) {
      g.gamma.assign(p->channels(), 0.0);
      g.beta.assign(p->channels(), 0.0);
    }
    return g;
  }
  LayerGrad& layer(const LayerParams* p) { return layer_[p]; }

  const BNGrad* find_bn(const BNParams* p) const {
    auto it = bn_.find(p);
    return it == bn_.end() ? nullptr : &it->second;
  }
  const LayerGrad* find_layer(const LayerParams* p) const {
    auto it = layer_.find(p);
    return it == layer_.end() ? nullptr : &it->second;
  }

  std::size_t bn_count() const { return bn_.size(); }
  std::size_t layer_count() const { return layer_.size(); }
  const std::map<const BNParams*, BNGrad>& bn_entries() const { return bn_; }
  const std::map<const LayerParams*, LayerGrad>& layer_entries() const { return layer_; }

  GradientSet& operator+=(const GradientSet& other) {
    auto add = [](std::vector<double>& dst, const std::vector<double>& src) {
      if (dst.empty()) dst.assign(src.size(), 0.0);
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    };
    for (const auto& [p, g] : other.bn_) {
      auto& mine = bn(p);
      add(mine.gamma, g.gamma);
      add(mine.beta, g.beta);
    }
    for (const auto& [p, g] : other.layer_) {
      auto& mine = layer_[p];
      add(mine.weights, g.weights);
      add(mine.bias, g.bias);
    }
    return *this;
  }

 private:
  std::map<const BNParams*, BNGrad> bn_;
  std::map<const LayerParams*, LayerGrad> layer_;
};

struct Node {
  std::size_t id = 0;
};

/// Records executed ops with their cached activations; replays them backward
/// (reverse mode) or forward (tangent mode).
class Tape {
 public:
  /// Accumulates into `grad_in[i]` (pre-sized to input i's shape).
  using BackwardFn = std::function<void(const Tensor4& grad_out, std::span<Tensor4> grad_in,
                                        GradientSet* params, GradScope scope)>;
  /// Tangent of the output given input tangents (nullptr = zero tangent).
  using TangentFn = std::function<Tensor4(std::span<const Tensor4* const> tangents)>;

  // Recorded closures refer back to this tape, so it stays put.
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Node input(Tensor4 x, std::string label = "input") {
    return push(std::move(label), std::move(x), {}, nullptr, nullptr);
  }

  Node conv2d(Node xn, const LayerParams& p, ConvOptions opt = {}) {
    const Tensor4& x = value(xn);
    check_conv_input(x, p);
    ConvGeometry g(x.shape().height, x.shape().width, p.kernel, opt);
    Tensor4 y(Shape4{x.shape().batch, p.out_channels, g.out_h, g.out_w});
    conv_forward(x, p, g, true, y);
    const Tape* self = this;
    const std::size_t xid = xn.id;
    const LayerParams* pp = &p;
    auto back = [self, xid, pp, g](const Tensor4& dy, std::span<Tensor4> dx, GradientSet* params,
                                   GradScope scope) {
      conv_backward_input(dy, *pp, g, dx[0]);
      if (params && scope == GradScope::all && !pp->frozen) {
        auto& lg = params->layer(pp);
        conv_backward_params(dy, self->nodes_[xid].value, *pp, g, lg.weights, lg.bias);
      }
    };
    auto tangent = [pp, g, shape = y.shape()](std::span<const Tensor4* const> t) {
      Tensor4 out(shape);
      conv_forward(*t[0], *pp, g, false, out);
      return out;
    };
    return push(p.name, std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  Node dense(Node xn, const LayerParams& p) {
    const Tensor4& x = value(xn);
    if (p.kind != LayerKind::dense) throw DimensionError("layer '" + p.name + "' is not dense");
    const std::size_t in = x.shape().per_sample(), batch = x.shape().batch;
    if (in != p.in_channels) {
      throw DimensionError("dense '" + p.name + "' expects " + std::to_string(p.in_channels) +
                           " features, got " + std::to_string(in));
    }
    const std::size_t out = p.out_channels;
    Tensor4 y(Shape4{batch, out, 1, 1});
    dense_apply(x, p, true, y);
    const Tape* self = this;
    const std::size_t xid = xn.id;
    const LayerParams* pp = &p;
    auto back = [self, xid, pp, batch, in, out](const Tensor4& dy, std::span<Tensor4> dx,
                                                GradientSet* params, GradScope scope) {
      for (std::size_t b = 0; b < batch; ++b) {
        double* dxs = dx[0].data().data() + b * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double g = dy[b * out + o];
          if (g == 0.0) continue;
          const double* wrow = pp->weights.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) dxs[i] += g * wrow[i];
        }
      }
      if (params && scope == GradScope::all && !pp->frozen) {
        auto& lg = params->layer(pp);
        lg.weights.resize(pp->weights.size(), 0.0);
        if (pp->has_bias()) lg.bias.resize(out, 0.0);
        const Tensor4& x = self->nodes_[xid].value;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xs = x.data().data() + b * in;
          for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[b * out + o];
            if (pp->has_bias()) lg.bias[o] += g;
            double* gw = lg.weights.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) gw[i] += g * xs[i];
          }
        }
      }
    };
    auto tangent = [pp, shape = y.shape()](std::span<const Tensor4* const> t) {
      Tensor4 r(shape);
      dense_apply(*t[0], *pp, false, r);
      return r;
    };
    return push(p.name, std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  Node activation(Node xn, Activation a, std::string label = {}) {
    const Tensor4& x = value(xn);
    Tensor4 y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(a, x[i]);
    if (a == Activation::identity) {
      auto back = [](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
        dx[0] += dy;
      };
      auto tangent = [](std::span<const Tensor4* const> t) { return *t[0]; };
      return push(label.empty() ? "identity" : std::move(label), std::move(y), {xn},
                  std::move(back), std::move(tangent));
    }
    std::vector<double> deriv(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) deriv[i] = activation_derivative(a, x[i]);
    auto shared = std::make_shared<const std::vector<double>>(std::move(deriv));
    auto back = [shared](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      const auto& d = *shared;
      for (std::size_t i = 0; i < d.size(); ++i) dx[0][i] += dy[i] * d[i];
    };
    auto tangent = [shared](std::span<const Tensor4* const> t) {
      Tensor4 r = *t[0];
      const auto& d = *shared;
      for (std::size_t i = 0; i < d.size(); ++i) r[i] *= d[i];
      return r;
    };
    return push(label.empty() ? std::string(to_string(a)) : std::move(label), std::move(y), {xn},
                std::move(back), std::move(tangent));
  }

  /// Per-channel normalization. Train mode uses batch statistics and updates the
  /// running averages; eval mode uses the running statistics.
  Node batchnorm(Node xn, BNParams& p, BNMode mode) {
    const Tensor4& x = value(xn);
    const auto& s = x.shape();
    const std::size_t C = s.channels, B = s.batch, P = s.plane();
    if (p.channels() != C) {
      throw DimensionError("batchnorm '" + p.name + "' has " + std::to_string(p.channels()) +
                           " channels, input has " + std::to_string(C));
    }
    if (p.beta.size() != C || p.running_mean.size() != C || p.running_var.size() != C) {
      throw DimensionError("batchnorm '" + p.name + "': parameter lengths differ");
    }
    Tensor4 y(s);
    const BNParams* pp = &p;
    if (mode == BNMode::eval) {
      std::vector<double> scale(C), shift(C);
      for (std::size_t c = 0; c < C; ++c) {
        const double inv = 1.0 / std::sqrt(p.running_var[c] + p.eps);
        scale[c] = p.gamma[c] * inv;
        shift[c] = p.beta[c] - scale[c] * p.running_mean[c];
      }
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          auto xi = x.plane(b, c);
          auto yo = y.plane(b, c);
          for (std::size_t i = 0; i < P; ++i) yo[i] = scale[c] * xi[i] + shift[c];
        }
      const Tape* self = this;
      const std::size_t xid = xn.id;
      auto back = [self, xid, pp, scale, B, C, P](const Tensor4& dy, std::span<Tensor4> dx,
                                                  GradientSet* params, GradScope scope) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            auto g = dy.plane(b, c);
            auto d = dx[0].plane(b, c);
            for (std::size_t i = 0; i < P; ++i) d[i] += scale[c] * g[i];
          }
        if (params && scope != GradScope::none && pp->trainable) {
          auto& bg = params->bn(pp);
          const Tensor4& x = self->nodes_[xid].value;
          for (std::size_t c = 0; c < C; ++c) {
            const double inv = 1.0 / std::sqrt(pp->running_var[c] + pp->eps);
            double dg = 0.0, db = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
              auto g = dy.plane(b, c);
              auto xi = x.plane(b, c);
              for (std::size_t i = 0; i < P; ++i) {
                dg += g[i] * (xi[i] - pp->running_mean[c]) * inv;
                db += g[i];
              }
            }
            bg.gamma[c] += dg;
            bg.beta[c] += db;
          }
        }
      };
      auto tangent = [scale, B, C, P](std::span<const Tensor4* const> t) {
        Tensor4 r = *t[0];
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (double& v : r.plane(b, c)) v *= scale[c];
        return r;
      };
      return push(p.name, std::move(y), {xn}, std::move(back), std::move(tangent));
    }

    if (B < 2) throw DimensionError("batchnorm '" + p.name + "': training mode needs batch size >= 2");
    const double count = static_cast<double>(B * P);
    std::vector<double> inv_std(C);
    Tensor4 xhat(s);
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (double v : x.plane(b, c)) mean += v;
      mean /= count;
      double var = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (double v : x.plane(b, c)) var += (v - mean) * (v - mean);
      var /= count;
      inv_std[c] = 1.0 / std::sqrt(var + p.eps);
      for (std::size_t b = 0; b < B; ++b) {
        auto xi = x.plane(b, c);
        auto xh = xhat.plane(b, c);
        auto yo = y.plane(b, c);
        for (std::size_t i = 0; i < P; ++i) {
          xh[i] = (xi[i] - mean) * inv_std[c];
          yo[i] = p.gamma[c] * xh[i] + p.beta[c];
        }
      }
      p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * mean;
      p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * var;
    }
    auto cache = std::make_shared<const Tensor4>(std::move(xhat));
    // Shared by backward and tangent: d = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat)).
    auto normalize_grad = [cache, pp, inv_std, B, C, P, count](const Tensor4& g, Tensor4& out,
                                                               std::vector<double>* sum_g,
                                                               std::vector<double>* sum_gx) {
      const Tensor4& xh = *cache;
      for (std::size_t c = 0; c < C; ++c) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          auto gp = g.plane(b, c);
          auto xp = xh.plane(b, c);
          for (std::size_t i = 0; i < P; ++i) {
            sg += gp[i];
            sgx += gp[i] * xp[i];
          }
        }
        if (sum_g) (*sum_g)[c] = sg;
        if (sum_gx) (*sum_gx)[c] = sgx;
        const double mg = sg / count, mgx = sgx / count, k = pp->gamma[c] * inv_std[c];
        for (std::size_t b = 0; b < B; ++b) {
          auto gp = g.plane(b, c);
          auto xp = xh.plane(b, c);
          auto op = out.plane(b, c);
          for (std::size_t i = 0; i < P; ++i) op[i] += k * (gp[i] - mg - xp[i] * mgx);
        }
      }
    };
    auto back = [normalize_grad, pp, C](const Tensor4& dy, std::span<Tensor4> dx,
                                        GradientSet* params, GradScope scope) {
      std::vector<double> sg(C), sgx(C);
      normalize_grad(dy, dx[0], &sg, &sgx);
      if (params && scope != GradScope::none && pp->trainable) {
        auto& bg = params->bn(pp);
        for (std::size_t c = 0; c < C; ++c) {
          bg.gamma[c] += sgx[c];
          bg.beta[c] += sg[c];
        }
      }
    };
    auto tangent = [normalize_grad, shape = s](std::span<const Tensor4* const> t) {
      Tensor4 r(shape);
      normalize_grad(*t[0], r, nullptr, nullptr);
      return r;
    };
    return push(p.name, std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  Node add(Node an, Node bn, std::string label = "add") {
    const Tensor4& a = value(an);
    a.require_same_shape(value(bn), "add");
    Tensor4 y = a;
    y += value(bn);
    auto back = [](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      dx[0] += dy;
      dx[1] += dy;
    };
    auto tangent = [shape = y.shape()](std::span<const Tensor4* const> t) {
      Tensor4 r(shape);
      if (t[0]) r += *t[0];
      if (t[1]) r += *t[1];
      return r;
    };
    return push(std::move(label), std::move(y), {an, bn}, std::move(back), std::move(tangent));
  }

  Node scale(Node xn, double factor, std::string label = "scale") {
    Tensor4 y = value(xn);
    y *= factor;
    auto back = [factor](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      for (std::size_t i = 0; i < dy.size(); ++i) dx[0][i] += factor * dy[i];
    };
    auto tangent = [factor](std::span<const Tensor4* const> t) {
      Tensor4 r = *t[0];
      r *= factor;
      return r;
    };
    return push(std::move(label), std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  /// Mean over the spatial plane: (B, C, H, W) -> (B, C, 1, 1).
  Node global_avg_pool(Node xn) {
    const Tensor4& x = value(xn);
    const auto s = x.shape();
    const double inv = 1.0 / static_cast<double>(s.plane());
    Tensor4 y(Shape4{s.batch, s.channels, 1, 1});
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t c = 0; c < s.channels; ++c) {
        double acc = 0.0;
        for (double v : x.plane(b, c)) acc += v;
        y(b, c, 0, 0) = acc * inv;
      }
    auto pool = [s, inv](const Tensor4& t) {
      Tensor4 r(Shape4{s.batch, s.channels, 1, 1});
      for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t c = 0; c < s.channels; ++c) {
          double acc = 0.0;
          for (double v : t.plane(b, c)) acc += v;
          r(b, c, 0, 0) = acc * inv;
        }
      return r;
    };
    auto back = [s, inv](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t c = 0; c < s.channels; ++c) {
          const double g = dy(b, c, 0, 0) * inv;
          for (double& v : dx[0].plane(b, c)) v += g;
        }
    };
    auto tangent = [pool](std::span<const Tensor4* const> t) { return pool(*t[0]); };
    return push("global_avg_pool", std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  /// Non-overlapping k x k average pooling; height and width must be multiples of k.
  Node avg_pool(Node xn, std::size_t k) {
    const Tensor4& x = value(xn);
    const auto s = x.shape();
    if (k == 0 || s.height % k != 0 || s.width % k != 0) {
      throw DimensionError("avg_pool window " + std::to_string(k) + " does not tile " + to_string(s));
    }
    const Shape4 os{s.batch, s.channels, s.height / k, s.width / k};
    const double inv = 1.0 / static_cast<double>(k * k);
    auto pool = [s, os, k, inv](const Tensor4& t) {
      Tensor4 r(os);
      for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t c = 0; c < s.channels; ++c)
          for (std::size_t y = 0; y < s.height; ++y)
            for (std::size_t x = 0; x < s.width; ++x) r(b, c, y / k, x / k) += inv * t(b, c, y, x);
      return r;
    };
    Tensor4 y = pool(x);
    auto back = [s, k, inv](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t c = 0; c < s.channels; ++c)
          for (std::size_t yy = 0; yy < s.height; ++yy)
            for (std::size_t xx = 0; xx < s.width; ++xx) dx[0](b, c, yy, xx) += inv * dy(b, c, yy / k, xx / k);
    };
    auto tangent = [pool](std::span<const Tensor4* const> t) { return pool(*t[0]); };
    return push("avg_pool", std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  Node concat_channels(Node an, Node bn) {
    const Tensor4& a = value(an);
    const Tensor4& b = value(bn);
    const auto sa = a.shape(), sb = b.shape();
    if (sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width) {
      throw DimensionError("concat of " + to_string(sa) + " and " + to_string(sb));
    }
    const Shape4 os{sa.batch, sa.channels + sb.channels, sa.height, sa.width};
    auto join = [sa, sb, os](const Tensor4* ta, const Tensor4* tb) {
      Tensor4 r(os);
      for (std::size_t n = 0; n < os.batch; ++n) {
        if (ta)
          for (std::size_t c = 0; c < sa.channels; ++c)
            std::ranges::copy(ta->plane(n, c), r.plane(n, c).begin());
        if (tb)
          for (std::size_t c = 0; c < sb.channels; ++c)
            std::ranges::copy(tb->plane(n, c), r.plane(n, sa.channels + c).begin());
      }
      return r;
    };
    Tensor4 y = join(&a, &b);
    auto back = [sa, sb](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      for (std::size_t n = 0; n < sa.batch; ++n) {
        for (std::size_t c = 0; c < sa.channels; ++c) {
          auto g = dy.plane(n, c);
          auto d = dx[0].plane(n, c);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        for (std::size_t c = 0; c < sb.channels; ++c) {
          auto g = dy.plane(n, sa.channels + c);
          auto d = dx[1].plane(n, c);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      }
    };
    auto tangent = [join](std::span<const Tensor4* const> t) { return join(t[0], t[1]); };
    return push("concat", std::move(y), {an, bn}, std::move(back), std::move(tangent));
  }

  /// Channels [begin, end) of x.
  Node slice_channels(Node xn, std::size_t begin, std::size_t end) {
    const Tensor4& x = value(xn);
    const auto s = x.shape();
    if (begin >= end || end > s.channels) throw DimensionError("channel slice out of range");
    const Shape4 os{s.batch, end - begin, s.height, s.width};
    auto cut = [os, begin](const Tensor4& t) {
      Tensor4 r(os);
      for (std::size_t n = 0; n < os.batch; ++n)
        for (std::size_t c = 0; c < os.channels; ++c)
          std::ranges::copy(t.plane(n, begin + c), r.plane(n, c).begin());
      return r;
    };
    Tensor4 y = cut(x);
    auto back = [os, begin](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      for (std::size_t n = 0; n < os.batch; ++n)
        for (std::size_t c = 0; c < os.channels; ++c) {
          auto g = dy.plane(n, c);
          auto d = dx[0].plane(n, begin + c);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    };
    auto tangent = [cut](std::span<const Tensor4* const> t) { return cut(*t[0]); };
    return push("slice", std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  /// Output channel i * groups + g takes input channel g * (C / groups) + i.
  Node channel_shuffle(Node xn, std::size_t groups) {
    const Tensor4& x = value(xn);
    const auto s = x.shape();
    if (groups == 0 || s.channels % groups != 0) throw DimensionError("channel shuffle groups");
    const std::size_t per = s.channels / groups;
    std::vector<std::size_t> src(s.channels);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < per; ++i) src[i * groups + g] = g * per + i;
    auto permute = [s, src](const Tensor4& t) {
      Tensor4 r(s);
      for (std::size_t n = 0; n < s.batch; ++n)
        for (std::size_t c = 0; c < s.channels; ++c)
          std::ranges::copy(t.plane(n, src[c]), r.plane(n, c).begin());
      return r;
    };
    Tensor4 y = permute(x);
    auto back = [s, src](const Tensor4& dy, std::span<Tensor4> dx, GradientSet*, GradScope) {
      for (std::size_t n = 0; n < s.batch; ++n)
        for (std::size_t c = 0; c < s.channels; ++c) {
          auto g = dy.plane(n, c);
          auto d = dx[0].plane(n, src[c]);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    };
    auto tangent = [permute](std::span<const Tensor4* const> t) { return permute(*t[0]); };
    return push("channel_shuffle", std::move(y), {xn}, std::move(back), std::move(tangent));
  }

  const Tensor4& value(Node n) const {
    if (n.id >= nodes_.size()) throw DimensionError("node id out of range");
    return nodes_[n.id].value;
  }
  const std::string& label(Node n) const { return nodes_.at(n.id).label; }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  Node last() const {
    if (nodes_.empty()) throw Error("tape is empty");
    return Node{nodes_.size() - 1};
  }

  /// Reverse sweep from `out` seeded with `seed`; returns parameter gradients.
  GradientSet backward(Node out, const Tensor4& seed, GradScope scope) const {
    GradientSet params;
    sweep_backward(out, seed, &params, scope);
    return params;
  }

  /// Vector-Jacobian product: seed^T * d(out)/d(wrt).
  Tensor4 vjp(Node out, const Tensor4& seed, Node wrt) const {
    auto grads = sweep_backward(out, seed, nullptr, GradScope::none);
    if (grads[wrt.id].empty()) return Tensor4(value(wrt).shape());
    return std::move(grads[wrt.id]);
  }

  /// Jacobian-vector product: d(out)/d(wrt) * tangent.
  Tensor4 jvp(Node out, Node wrt, const Tensor4& tangent) const {
    if (out.id >= nodes_.size() || wrt.id > out.id) throw DimensionError("jvp node order");
    tangent.require_same_shape(value(wrt), "jvp");
    std::vector<Tensor4> tan(out.id + 1);
    std::vector<bool> live(out.id + 1, false);
    tan[wrt.id] = tangent;
    live[wrt.id] = true;
    for (std::size_t i = wrt.id + 1; i <= out.id; ++i) {
      const auto& rec = nodes_[i];
      std::vector<const Tensor4*> in;
      bool any = false;
      for (Node src : rec.inputs) {
        const bool l = live[src.id];
        in.push_back(l ? &tan[src.id] : nullptr);
        any = any || l;
      }
      if (!any) continue;
      tan[i] = rec.tangent(in);
      live[i] = true;
    }
    if (!live[out.id]) return Tensor4(value(out).shape());
    return std::move(tan[out.id]);
  }

 private:
  struct Record {
    std::string label;
    Tensor4 value;
    std::vector<Node> inputs;
    BackwardFn backward;
    TangentFn tangent;
  };

  static void dense_apply(const Tensor4& x, const LayerParams& p, bool add_bias, Tensor4& y) {
    const std::size_t in = p.in_channels, out = p.out_channels, batch = x.shape().batch;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* xs = x.data().data() + b * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double* wrow = p.weights.data() + o * in;
        double acc = (add_bias && p.has_bias()) ? p.bias[o] : 0.0;
        for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * xs[i];
        y[b * out + o] = acc;
      }
    }
  }

  Node push(std::string label, Tensor4 value, std::vector<Node> inputs, BackwardFn back,
            TangentFn tangent) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by layer '" + label + "'");
    }
    nodes_.push_back(Record{std::move(label), std::move(value), std::move(inputs), std::move(back),
                            std::move(tangent)});
    return Node{nodes_.size() - 1};
  }

  std::vector<Tensor4> sweep_backward(Node out, const Tensor4& seed, GradientSet* params,
                                      GradScope scope) const {
    if (nodes_.empty()) throw Error("backward called on an empty tape");
    if (out.id >= nodes_.size()) throw DimensionError("node id out of range");
    seed.require_same_shape(nodes_[out.id].value, "backward seed");
    std::vector<Tensor4> grads(out.id + 1);
    grads[out.id] = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      const auto& rec = nodes_[i];
      if (grads[i].empty() || !rec.backward) continue;
      std::vector<Tensor4> in;
      in.reserve(rec.inputs.size());
      for (Node src : rec.inputs) {
        in.push_back(grads[src.id].empty() ? Tensor4(nodes_[src.id].value.shape())
                                           : std::move(grads[src.id]));
      }
      rec.backward(grads[i], in, params, scope);
      for (std::size_t k = 0; k < rec.inputs.size(); ++k) {
        const auto id = rec.inputs[k].id;
        if (grads[id].empty()) {
          grads[id] = std::move(in[k]);
        } else {
          grads[id] += in[k];  // same node feeding two inputs of one op
        }
      }
      if (i != out.id) grads[i] = Tensor4();
    }
    return grads;
  }

  std::vector<Record> nodes_;
};

/// d(loss)/d(gamma, beta) for every trainable BN node; seeds the tape's last node.
inline GradientSet backward_bn_only(const Tape& tape, const Tensor4& loss_grad) {
  if (tape.empty()) throw Error("backward called on an empty tape");
  return tape.backward(tape.last(), loss_grad, GradScope::bn_only);
}

struct LossResult {
  double loss = 0.0;
  Tensor4 grad;  // d(mean loss)/d(logits)
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy over the batch; logits are (B, K, 1, 1).
inline LossResult softmax_cross_entropy(const Tensor4& logits, std::span<const int> labels) {
  const std::size_t B = logits.shape().batch, K = logits.shape().per_sample();
  if (labels.size() != B) throw DimensionError("label count does not match batch size");
  LossResult r;
  r.grad = Tensor4(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw DimensionError("label " + std::to_string(label) + " outside [0, " + std::to_string(K) + ")");
    }
    const double* z = logits.data().data() + b * K;
    const double zmax = *std::max_element(z, z + K);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[k] - zmax);
    const double log_denom = std::log(denom) + zmax;
    r.loss += log_denom - z[label];
    std::size_t arg = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (z[k] > z[arg]) arg = k;
      const double prob = std::exp(z[k] - log_denom);
      r.grad[b * K + k] = (prob - (static_cast<int>(k) == label ? 1.0 : 0.0)) / static_cast<double>(B);
    }
    if (static_cast<int>(arg) == label) ++r.correct;
  }
  r.loss /= static_cast<double>(B);
  return r;
}

/// One entry of a sequential block: a linear layer or a batchnorm.
using BlockLayer = std::variant<const LayerParams*, BNParams*>;

/// Sequential block: each linear layer is followed by its batchnorm (when the
/// next entry is one) and then the activation.
inline Node forward_block(Tape& tape, Node x, std::span<const BlockLayer> layers, Activation act,
                          BNMode mode = BNMode::eval, ConvOptions opt = {}) {
  Node h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (auto* bn = std::get_if<BNParams*>(&layers[i])) {
      h = tape.batchnorm(h, **bn, mode);
      continue;
    }
    const LayerParams& p = *std::get<const LayerParams*>(layers[i]);
    h = p.kind == LayerKind::dense ? tape.dense(h, p) : tape.conv2d(h, p, opt);
    if (i + 1 < layers.size() && std::holds_alternative<BNParams*>(layers[i + 1])) {
      h = tape.batchnorm(h, *std::get<BNParams*>(layers[i + 1]), mode);
      ++i;
    }
    h = tape.activation(h, act, p.name + "." + std::string(to_string(act)));
  }
  return h;
}

inline Tensor4 forward_block(const Tensor4& x, std::span<const BlockLayer> layers, Activation act,
                             BNMode mode = BNMode::eval, ConvOptions opt = {}) {
  Tape tape;
  const Node out = forward_block(tape, tape.input(x), layers, act, mode, opt);
  return tape.value(out);
}

}  // namespace isonas
