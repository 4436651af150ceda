#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/sampler.hpp"
#include "isonas/supernet.hpp"

namespace isonas {

/// Module scores S[l][m]. Normal layers carry the layer factor Mean|gamma_u|; on
/// reduction layers layer_weight is 1 and is_reduction is set.
struct ScoreTable {
  std::vector<std::vector<double>> scores;
  std::vector<double> layer_weight;
  std::vector<bool> is_reduction;

  std::size_t depth() const { return scores.size(); }
  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

inline double mean_abs(std::span<const double> v) {
  if (v.empty()) throw DimensionError("mean of an empty parameter vector");
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s / static_cast<double>(v.size());
}

/// block_gammas[l][m] is the gamma vector of block indicator (l, m); layer_gammas[l]
/// is the layer indicator's gamma (ignored on reduction layers).
inline ScoreTable compute_scores(const std::vector<std::vector<std::vector<double>>>& block_gammas,
                                 const std::vector<std::vector<double>>& layer_gammas,
                                 const std::vector<bool>& is_reduction) {
  const std::size_t L = block_gammas.size();
  if (layer_gammas.size() != L || is_reduction.size() != L) throw DimensionError("score inputs differ in depth");
  ScoreTable t;
  t.is_reduction = is_reduction;
  for (std::size_t l = 0; l < L; ++l) {
    const double u = is_reduction[l] ? 1.0 : mean_abs(layer_gammas[l]);
    t.layer_weight.push_back(u);
    std::vector<double> row;
    for (const auto& g : block_gammas[l]) row.push_back(mean_abs(g) * u);
    t.scores.push_back(std::move(row));
  }
  return t;
}

inline ScoreTable compute_scores(const Supernet& net) {
  std::vector<std::vector<std::vector<double>>> blocks;
  std::vector<std::vector<double>> layers;
  std::vector<bool> reduction;
  for (std::size_t l = 0; l < net.space.depth(); ++l) {
    std::vector<std::vector<double>> row;
    for (const auto& b : net.blocks[l]) row.push_back(b.indicator.gamma);
    blocks.push_back(std::move(row));
    reduction.push_back(net.space.layers[l].is_reduction);
    layers.push_back(net.layer_indicators[l] ? net.layer_indicators[l]->gamma : std::vector<double>{});
  }
  return compute_scores(blocks, layers, reduction);
}

/// Per-layer argmax; ties go to the lowest candidate index.
inline PathSample select_top_per_layer(const ScoreTable& t) {
  PathSample p;
  for (const auto& row : t.scores) {
    if (row.empty()) throw DimensionError("score row is empty");
    std::size_t best = 0;
    for (std::size_t m = 1; m < row.size(); ++m)
      if (row[m] > row[best]) best = m;
    p.choices.push_back(static_cast<int>(best));
  }
  return p;
}

inline double path_score(const ScoreTable& t, const PathSample& p) {
  if (p.choices.size() != t.depth()) throw DimensionError("path depth differs from score table");
  double s = 0.0;
  for (std::size_t l = 0; l < p.choices.size(); ++l) s += t.scores[l].at(static_cast<std::size_t>(p.choices[l]));
  return s;
}

}  // namespace isonas
