#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/layers.hpp"
#include "isonas/tensor.hpp"

namespace isonas {

enum class Padding { zero, circular };

struct ConvOptions {
  std::size_t stride = 1;
  Padding padding = Padding::zero;
};

/// Source-index tables for a 'same'-padded convolution; -1 marks a zero-padded tap.
struct ConvGeometry {
  std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0, kernel = 1;
  std::vector<std::ptrdiff_t> src_y;  // out_h x kernel
  std::vector<std::ptrdiff_t> src_x;  // out_w x kernel

  ConvGeometry(std::size_t h, std::size_t w, std::size_t k, ConvOptions opt)
      : in_h(h), in_w(w), kernel(k) {
    if (k % 2 == 0) throw DimensionError("conv kernel size must be odd, got " + std::to_string(k));
    if (opt.stride == 0) throw DimensionError("conv stride must be positive");
    out_h = (h - 1) / opt.stride + 1;
    out_w = (w - 1) / opt.stride + 1;
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    auto table = [&](std::size_t in, std::size_t out, std::vector<std::ptrdiff_t>& dst) {
      dst.resize(out * k);
      const auto n = static_cast<std::ptrdiff_t>(in);
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t t = 0; t < k; ++t) {
          std::ptrdiff_t s = static_cast<std::ptrdiff_t>(o * opt.stride + t) - pad;
          if (opt.padding == Padding::circular) {
            s = ((s % n) + n) % n;
          } else if (s < 0 || s >= n) {
            s = -1;
          }
          dst[o * k + t] = s;
        }
      }
    };
    table(h, out_h, src_y);
    table(w, out_w, src_x);
  }
};

inline void check_conv_input(const Tensor4& x, const LayerParams& p) {
  if (p.kind != LayerKind::conv) throw DimensionError("layer '" + p.name + "' is not a conv");
  if (x.shape().channels != p.in_channels) {
    throw DimensionError("conv '" + p.name + "' expects " + std::to_string(p.in_channels) +
                         " input channels, got " + std::to_string(x.shape().channels));
  }
}

/// out = conv(x, weights) (+ bias when requested). `out` must be pre-shaped.
inline void conv_forward(const Tensor4& x, const LayerParams& p, const ConvGeometry& g,
                         bool add_bias, Tensor4& out) {
  const auto& s = x.shape();
  const std::size_t k = p.kernel, ipg = p.in_per_group(), opg = p.out_per_group();
  out.fill(0.0);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t co = 0; co < p.out_channels; ++co) {
      const std::size_t grp = co / opg;
      double* orow0 = out.plane(b, co).data();
      for (std::size_t ci = 0; ci < ipg; ++ci) {
        const double* xp = x.plane(b, grp * ipg + ci).data();
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double w = p.w(co, ci, ky, kx);
            if (w == 0.0) continue;
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              const auto iy = g.src_y[oy * k + ky];
              if (iy < 0) continue;
              const double* xrow = xp + static_cast<std::size_t>(iy) * g.in_w;
              double* orow = orow0 + oy * g.out_w;
              for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                const auto ix = g.src_x[ox * k + kx];
                if (ix >= 0) orow[ox] += w * xrow[ix];
              }
            }
          }
        }
      }
      if (add_bias && p.has_bias()) {
        const double bias = p.bias[co];
        for (std::size_t i = 0; i < g.out_h * g.out_w; ++i) orow0[i] += bias;
      }
    }
  }
}

/// dx += conv^T(dy).
inline void conv_backward_input(const Tensor4& dy, const LayerParams& p, const ConvGeometry& g,
                                Tensor4& dx) {
  const auto& s = dy.shape();
  const std::size_t k = p.kernel, ipg = p.in_per_group(), opg = p.out_per_group();
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t co = 0; co < p.out_channels; ++co) {
      const std::size_t grp = co / opg;
      const double* dyp = dy.plane(b, co).data();
      for (std::size_t ci = 0; ci < ipg; ++ci) {
        double* dxp = dx.plane(b, grp * ipg + ci).data();
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double w = p.w(co, ci, ky, kx);
            if (w == 0.0) continue;
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              const auto iy = g.src_y[oy * k + ky];
              if (iy < 0) continue;
              double* dxrow = dxp + static_cast<std::size_t>(iy) * g.in_w;
              const double* dyrow = dyp + oy * g.out_w;
              for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                const auto ix = g.src_x[ox * k + kx];
                if (ix >= 0) dxrow[ix] += w * dyrow[ox];
              }
            }
          }
        }
      }
    }
  }
}

/// dw += <dy, x patches>, db += sum(dy).
inline void conv_backward_params(const Tensor4& dy, const Tensor4& x, const LayerParams& p,
                                 const ConvGeometry& g, std::vector<double>& dw,
                                 std::vector<double>& db) {
  const auto& s = dy.shape();
  const std::size_t k = p.kernel, ipg = p.in_per_group(), opg = p.out_per_group();
  dw.resize(p.weights.size(), 0.0);
  if (p.has_bias()) db.resize(p.bias.size(), 0.0);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t co = 0; co < p.out_channels; ++co) {
      const std::size_t grp = co / opg;
      const double* dyp = dy.plane(b, co).data();
      if (p.has_bias()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.out_h * g.out_w; ++i) acc += dyp[i];
        db[co] += acc;
      }
      for (std::size_t ci = 0; ci < ipg; ++ci) {
        const double* xp = x.plane(b, grp * ipg + ci).data();
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            double acc = 0.0;
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              const auto iy = g.src_y[oy * k + ky];
              if (iy < 0) continue;
              const double* xrow = xp + static_cast<std::size_t>(iy) * g.in_w;
              const double* dyrow = dyp + oy * g.out_w;
              for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                const auto ix = g.src_x[ox * k + kx];
                if (ix >= 0) acc += dyrow[ox] * xrow[ix];
              }
            }
            dw[((co * ipg + ci) * k + ky) * k + kx] += acc;
          }
        }
      }
    }
  }
}

}  // namespace isonas
