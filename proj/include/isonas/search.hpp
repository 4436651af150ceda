#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "isonas/cost.hpp"
#include "isonas/errors.hpp"
#include "isonas/random.hpp"
#include "isonas/sampler.hpp"
#include "isonas/scoring.hpp"

namespace isonas {

struct Constraint {
  std::optional<std::uint64_t> max_flops;
  std::optional<std::uint64_t> max_params;

  bool admits(const Cost& c) const {
    return (!max_flops || c.flops <= *max_flops) && (!max_params || c.params <= *max_params);
  }
};

struct RankedSubnet {
  PathSample path;
  double score = 0.0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

/// Higher score first; equal scores in lexicographic path order.
inline bool ranks_before(const RankedSubnet& a, const RankedSubnet& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.path.choices < b.path.choices;
}

enum class SearchStrategy { exhaustive, evolutionary };

inline SearchStrategy parse_search_strategy(std::string_view s) {
  if (s == "exhaustive") return SearchStrategy::exhaustive;
  if (s == "evolutionary") return SearchStrategy::evolutionary;
  throw ConfigError("unknown search strategy '" + std::string(s) + "'");
}

struct EvolutionConfig {
  std::size_t population = 64;
  std::size_t generations = 50;
  double mutation_rate = 0.1;  // per layer
  std::size_t elitism = 4;
  std::size_t tournament = 3;
};

inline constexpr std::uint64_t kMaxExhaustive = 1'000'000;

namespace detail {

inline RankedSubnet rank_entry(const ScoreTable& t, const CostTable& c, PathSample p) {
  const Cost cost = path_cost(c, p);
  const double s = path_score(t, p);
  return {std::move(p), s, cost.flops, cost.params};
}

inline std::vector<RankedSubnet> take_top(std::vector<RankedSubnet> all, std::size_t k) {
  const std::size_t n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), ranks_before);
  all.resize(n);
  return all;
}

inline std::vector<RankedSubnet> exhaustive(const ScoreTable& t, const CostTable& c, const Constraint& con,
                                            std::size_t k) {
  std::uint64_t total = 1;
  for (const auto& row : t.scores) {
    total *= row.size();
    if (total > kMaxExhaustive) {
      throw ConfigError("exhaustive search is limited to " + std::to_string(kMaxExhaustive) + " subnets");
    }
  }
  std::vector<RankedSubnet> feasible;
  PathSample p{std::vector<int>(t.depth(), 0)};
  for (std::uint64_t i = 0; i < total; ++i) {
    auto e = rank_entry(t, c, p);
    if (con.admits({e.flops, e.params})) feasible.push_back(std::move(e));
    for (std::size_t l = t.depth(); l-- > 0;) {  // odometer, last layer fastest
      if (static_cast<std::size_t>(++p.choices[l]) < t.scores[l].size()) break;
      p.choices[l] = 0;
    }
  }
  return take_top(std::move(feasible), k);
}

/// Evolution over feasible subnets; every evaluated subnet enters an archive from
/// which the top K are reported.
inline std::vector<RankedSubnet> evolutionary(const ScoreTable& t, const CostTable& c, const Constraint& con,
                                              std::size_t k, Rng& rng, const EvolutionConfig& cfg) {
  if (cfg.population < 2 || cfg.tournament < 1) throw ConfigError("evolution needs population >= 2");
  const std::size_t L = t.depth();
  std::map<std::vector<int>, RankedSubnet> archive;
  auto feasible = [&](const PathSample& p) {
    const Cost cc = path_cost(c, p);
    return con.admits(cc);
  };
  auto record = [&](const PathSample& p) {
    auto [it, inserted] = archive.try_emplace(p.choices, RankedSubnet{});
    if (inserted) it->second = rank_entry(t, c, p);
    return inserted;
  };
  auto random_path = [&]() {
    PathSample p{std::vector<int>(L)};
    for (std::size_t l = 0; l < L; ++l) p.choices[l] = static_cast<int>(rng.below(t.scores[l].size()));
    return p;
  };
  auto mutate = [&](PathSample p, double rate) {
    for (std::size_t l = 0; l < L; ++l)
      if (t.scores[l].size() > 1 && rng.uniform() < rate) p.choices[l] = static_cast<int>(rng.below(t.scores[l].size()));
    return p;
  };

  // Seeds: per-layer best score and per-layer cheapest block, then random feasible draws.
  std::vector<RankedSubnet> pop;
  auto admit = [&](const PathSample& p) {
    if (!feasible(p)) return;
    record(p);
    pop.push_back(archive.at(p.choices));
  };
  admit(select_top_per_layer(t));
  PathSample cheapest{std::vector<int>(L)};
  for (std::size_t l = 0; l < L; ++l) {
    std::size_t best = 0;
    for (std::size_t m = 1; m < c.cost[l].size(); ++m)
      if (c.cost[l][m].flops < c.cost[l][best].flops ||
          (c.cost[l][m].flops == c.cost[l][best].flops && c.cost[l][m].params < c.cost[l][best].params))
        best = m;
    cheapest.choices[l] = static_cast<int>(best);
  }
  admit(cheapest);
  for (std::size_t tries = 0; pop.size() < cfg.population && tries < 50 * cfg.population; ++tries) admit(random_path());
  if (pop.empty()) throw InfeasibleError("no feasible subnet found under the constraint");

  auto tournament = [&]() -> const RankedSubnet& {
    const RankedSubnet* best = &pop[rng.below(pop.size())];
    for (std::size_t i = 1; i < cfg.tournament; ++i) {
      const RankedSubnet& other = pop[rng.below(pop.size())];
      if (ranks_before(other, *best)) best = &other;
    }
    return *best;
  };

  for (std::size_t gen = 0; gen < cfg.generations; ++gen) {
    std::sort(pop.begin(), pop.end(), ranks_before);
    std::vector<RankedSubnet> next(pop.begin(), pop.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.elitism, pop.size())));
    std::size_t attempts = 0;
    while (next.size() < cfg.population && attempts < 20 * cfg.population) {
      ++attempts;
      const auto& a = tournament();
      const auto& b = tournament();
      PathSample child{a.path.choices};
      if (L > 1) {
        const std::size_t cut = 1 + rng.below(L - 1);
        for (std::size_t l = cut; l < L; ++l) child.choices[l] = b.path.choices[l];
      }
      child = mutate(std::move(child), cfg.mutation_rate);
      // Re-mutate children already seen so the archive keeps growing.
      for (int r = 0; r < 4 && archive.contains(child.choices); ++r) child = mutate(std::move(child), 0.5);
      if (!feasible(child)) continue;
      record(child);
      next.push_back(archive.at(child.choices));
    }
    pop = std::move(next);
  }
  std::vector<RankedSubnet> all;
  all.reserve(archive.size());
  for (auto& [key, entry] : archive) all.push_back(entry);
  return take_top(std::move(all), k);
}

}  // namespace detail

/// K feasible subnets with the highest score sums, best first.
inline std::vector<RankedSubnet> search_topk(const ScoreTable& table, const CostTable& costs, const Constraint& con,
                                             std::size_t k, SearchStrategy strategy, Rng& rng,
                                             const EvolutionConfig& evo = {}) {
  if (k == 0) throw ConfigError("K must be positive");
  if (costs.cost.size() != table.depth()) throw DimensionError("cost table depth differs from score table");
  for (std::size_t l = 0; l < table.depth(); ++l)
    if (costs.cost[l].size() != table.scores[l].size()) throw DimensionError("cost table width differs at layer " + std::to_string(l));
  std::vector<RankedSubnet> out = strategy == SearchStrategy::exhaustive
                                      ? detail::exhaustive(table, costs, con, k)
                                      : detail::evolutionary(table, costs, con, k, rng, evo);
  if (out.empty()) throw InfeasibleError("no feasible subnet satisfies the constraint");
  return out;
}

inline std::vector<RankedSubnet> search_topk(const ScoreTable& table, const SearchSpace& space, const Constraint& con,
                                             std::size_t k, SearchStrategy strategy, Rng& rng,
                                             const EvolutionConfig& evo = {}) {
  return search_topk(table, cost_table(space), con, k, strategy, rng, evo);
}

}  // namespace isonas
