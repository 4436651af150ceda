#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/sampler.hpp"
#include "isonas/search_space.hpp"

namespace isonas {

/// Multiply-accumulates and weight count; biases and BN parameters are not counted.
struct Cost {
  std::uint64_t flops = 0;
  std::uint64_t params = 0;

  Cost& operator+=(const Cost& o) {
    flops += o.flops;
    params += o.params;
    return *this;
  }
  friend bool operator==(const Cost&, const Cost&) = default;
};

/// Conv with `groups` groups producing an out_side x out_side map.
inline Cost conv_cost(std::size_t d_out, std::size_t d_in, std::size_t k, std::size_t out_side,
                      std::size_t groups = 1) {
  const std::uint64_t w = static_cast<std::uint64_t>(d_out) * (d_in / groups) * k * k;
  return {w * out_side * out_side, w};
}

/// Cost of one candidate block at channel width d on an n_in x n_in input.
inline Cost block_cost(const BlockTemplate& t, std::size_t d, std::size_t n_in) {
  const std::size_t n_out = (n_in - 1) / t.stride + 1, k = t.kernel, h = d / 2;
  Cost c;
  switch (t.kind) {
    case BlockKind::plain_conv:
      c += conv_cost(d, d, k, n_out);
      break;
    case BlockKind::mbconv: {
      const std::size_t e = d * t.expansion;
      c += conv_cost(e, d, 1, n_in);
      c += conv_cost(e, e, k, n_out, e);
      c += conv_cost(d, e, 1, n_out);
      break;
    }
    case BlockKind::shuffle:
      if (t.stride == 2) {
        c += conv_cost(h, h, k, n_out, h);
        c += conv_cost(h, h, 1, n_out);
      }
      c += conv_cost(h, h, 1, n_in);
      c += conv_cost(h, h, k, n_out, h);
      c += conv_cost(h, h, 1, n_out);
      break;
    case BlockKind::shuffle_xception:
      if (t.stride == 2) {
        c += conv_cost(h, h, k, n_out, h);
        c += conv_cost(h, h, 1, n_out);
      }
      for (int r = 0; r < 3; ++r) {
        c += conv_cost(h, h, k, n_out, h);
        c += conv_cost(h, h, 1, n_out);
      }
      break;
  }
  return c;
}

/// Per-layer, per-candidate costs of a search space.
struct CostTable {
  std::vector<std::vector<Cost>> cost;
};

inline CostTable cost_table(const SearchSpace& space) {
  CostTable t;
  for (std::size_t l = 0; l < space.depth(); ++l) {
    std::vector<Cost> row;
    for (const auto& cand : space.layers[l].candidates)
      row.push_back(block_cost(cand, space.layers[l].channels, space.feature_size(l)));
    t.cost.push_back(std::move(row));
  }
  return t;
}

inline Cost path_cost(const CostTable& t, const PathSample& p) {
  if (p.choices.size() != t.cost.size()) throw DimensionError("path depth differs from cost table");
  Cost c;
  for (std::size_t l = 0; l < p.choices.size(); ++l) {
    if (p.choices[l] < 0) throw ConfigError("cost of a layer-indicator path is undefined");
    c += t.cost[l].at(static_cast<std::size_t>(p.choices[l]));
  }
  return c;
}

/// MACs and weights of the blocks on `path` (stem and head excluded).
inline Cost flops_and_params(const PathSample& path, const SearchSpace& space) {
  return path_cost(cost_table(space), path);
}

}  // namespace isonas
