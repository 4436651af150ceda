#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/init.hpp"
#include "isonas/layers.hpp"
#include "isonas/meanfield.hpp"
#include "isonas/random.hpp"
#include "isonas/search_space.hpp"
#include "isonas/tape.hpp"

namespace isonas {

/// How a block's frozen weights are drawn.
struct BlockInit {
  InitScheme scheme = InitScheme::orthogonal_triangular;
  double v_star = 0.025;                  // pre-activation variance every tanh layer sees
  double gaussian_weight_variance = 2.0;  // v_W in gaussian contrast mode
  std::uint64_t seed = 0;
};

/// One candidate block with channels d -> d. The block input is assumed to have unit
/// variance per unit; the first linear op scales it to v_star, later layers sit at
/// the critical point of the variance map, and the indicator BN restores unit variance.
struct Block {
  BlockTemplate tmpl;
  std::size_t channels = 0;
  std::vector<LayerParams> layers;
  BNParams indicator;
};

namespace detail {

struct LayerPlan {
  std::string suffix;
  std::size_t out = 0, in = 0, kernel = 1, groups = 1;
  bool bias = false;
  double gain = 1.0;
  ConvLayout layout = ConvLayout::flattened;
};

inline std::vector<LayerPlan> plan_block(const BlockTemplate& t, std::size_t d, double entry_gain,
                                         double gain) {
  const std::size_t k = t.kernel, h = d / 2;
  std::vector<LayerPlan> plan;
  auto dw = [&](std::string name, std::size_t c, double g, bool bias) {
    plan.push_back({std::move(name), c, c, k, c, bias, g, ConvLayout::delta});
  };
  auto pw = [&](std::string name, std::size_t out, std::size_t in, double g, bool bias) {
    plan.push_back({std::move(name), out, in, 1, 1, bias, g, ConvLayout::flattened});
  };
  switch (t.kind) {
    case BlockKind::plain_conv:
      plan.push_back({"conv", d, d, k, 1, false, entry_gain, ConvLayout::orthogonal_kernel});
      break;
    case BlockKind::mbconv: {
      const std::size_t e = d * t.expansion;
      pw("expand", e, d, entry_gain, false);
      dw("depthwise", e, gain, true);
      pw("project", d, e, gain, true);
      break;
    }
    case BlockKind::shuffle:
      if (t.stride == 2) {
        dw("left.depthwise", h, entry_gain, false);
        pw("left.pointwise", h, h, 1.0, false);
      }
      pw("right.pointwise1", h, h, entry_gain, false);
      dw("right.depthwise", h, gain, true);
      pw("right.pointwise2", h, h, 1.0, false);
      break;
    case BlockKind::shuffle_xception:
      if (t.stride == 2) {
        dw("left.depthwise", h, entry_gain, false);
        pw("left.pointwise", h, h, 1.0, false);
      }
      for (int r = 0; r < 3; ++r) {
        const std::string tag = "right.round" + std::to_string(r + 1);
        dw(tag + ".depthwise", h, r == 0 ? entry_gain : gain, r != 0);
        pw(tag + ".pointwise", h, h, 1.0, false);
      }
      break;
  }
  return plan;
}

}  // namespace detail

inline Block build_block(const BlockTemplate& t, std::size_t channels, const BlockInit& init,
                         const std::string& name) {
  if (channels < 2 || channels % 2 != 0) throw ConfigError(name + ": channels must be even");
  const CriticalPoint cp = critical_point(t.activation, init.v_star);
  const double entry_gain = std::sqrt(init.v_star);
  Block b;
  b.tmpl = t;
  b.channels = channels;
  const auto plan = detail::plan_block(t, channels, entry_gain, cp.gain);
  b.layers.reserve(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& lp = plan[i];
    LayerParams p = LayerParams::conv(name + "." + lp.suffix, lp.out, lp.in, lp.kernel, lp.groups, lp.bias);
    InitSpec spec;
    spec.seed = derive_seed(init.seed, i);
    spec.bias_variance = cp.bias_variance;
    if (init.scheme == InitScheme::gaussian) {
      spec.scheme = InitScheme::gaussian;
      spec.weight_variance = init.gaussian_weight_variance;
    } else {
      spec.scheme = init.scheme;
      spec.gain = lp.gain;
    }
    init_layer(p, spec, lp.layout);
    b.layers.push_back(std::move(p));
  }
  // Tie the mbconv projection to the expansion: project = g * expand^T * sign(depthwise),
  // so project * diag(depthwise) * expand is a multiple of the identity.
  if (t.kind == BlockKind::mbconv && init.scheme == InitScheme::orthogonal_triangular) {
    const auto& expand = b.layers[0];
    const auto& depthwise = b.layers[1];
    auto& project = b.layers[2];
    const std::size_t e = expand.out_channels, centre = t.kernel / 2;
    for (std::size_t o = 0; o < channels; ++o)
      for (std::size_t c = 0; c < e; ++c) {
        const double sign = depthwise.w(c, 0, centre, centre) < 0.0 ? -1.0 : 1.0;
        project.w(o, c, 0, 0) = cp.gain * sign * expand.w(c, o, 0, 0) / entry_gain;
      }
  }
  for (auto& p : b.layers) p.frozen = true;
  b.indicator = BNParams(name + ".indicator", channels, true);
  return b;
}

/// Records the block on the tape. `indicator_mode` governs only the indicator BN.
inline Node forward_block(Tape& tape, Node x, Block& b, BNMode indicator_mode, Padding padding,
                          bool with_indicator = true) {
  const auto& t = b.tmpl;
  const Activation act = t.activation;
  const std::size_t d = b.channels, h = d / 2;
  const ConvOptions unit{1, padding}, strided{t.stride, padding};
  std::size_t next = 0;
  auto layer = [&]() -> const LayerParams& { return b.layers.at(next++); };
  auto sigma = [&](Node n, const std::string& label) { return tape.activation(n, act, label); };

  Node out{};
  switch (t.kind) {
    case BlockKind::plain_conv: {
      const auto& conv = layer();
      out = sigma(tape.conv2d(x, conv, strided), conv.name + ".act");
      break;
    }
    case BlockKind::mbconv: {
      const auto& expand = layer();
      const auto& depthwise = layer();
      const auto& project = layer();
      Node e = sigma(tape.conv2d(x, expand, unit), expand.name + ".act");
      Node dwn = sigma(tape.conv2d(e, depthwise, strided), depthwise.name + ".act");
      out = tape.conv2d(dwn, project, unit);
      break;
    }
    case BlockKind::shuffle:
    case BlockKind::shuffle_xception: {
      Node left = tape.slice_channels(x, 0, h);
      Node right = tape.slice_channels(x, h, d);
      if (t.stride == 2) {
        const auto& ldw = layer();
        const auto& lpw = layer();
        left = sigma(tape.conv2d(tape.conv2d(left, ldw, strided), lpw, unit), lpw.name + ".act");
      }
      if (t.kind == BlockKind::shuffle) {
        const auto& pw1 = layer();
        const auto& dw = layer();
        const auto& pw2 = layer();
        Node r = sigma(tape.conv2d(right, pw1, unit), pw1.name + ".act");
        r = tape.conv2d(r, dw, strided);
        right = sigma(tape.conv2d(r, pw2, unit), pw2.name + ".act");
      } else {
        for (int round = 0; round < 3; ++round) {
          const auto& dw = layer();
          const auto& pw = layer();
          right = tape.conv2d(right, dw, round == 0 ? strided : unit);
          right = sigma(tape.conv2d(right, pw, unit), pw.name + ".act");
        }
      }
      out = tape.channel_shuffle(tape.concat_channels(left, right), 2);
      break;
    }
  }
  if (with_indicator) out = tape.batchnorm(out, b.indicator, indicator_mode);
  return out;
}

}  // namespace isonas
