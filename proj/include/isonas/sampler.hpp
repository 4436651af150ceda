#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "isonas/random.hpp"
#include "isonas/search_space.hpp"

namespace isonas {

/// Marks the identity + layer-indicator branch of a normal layer.
inline constexpr int kLayerId = -1;

struct PathSample {
  std::vector<int> choices;  // candidate index per layer, or kLayerId

  friend bool operator==(const PathSample&, const PathSample&) = default;
  friend auto operator<=>(const PathSample&, const PathSample&) = default;

  bool has_layer_id() const {
    for (int c : choices)
      if (c == kLayerId) return true;
    return false;
  }
};

inline std::string to_string(const PathSample& p) {
  std::string s = "[";
  for (std::size_t i = 0; i < p.choices.size(); ++i) {
    if (i) s += ',';
    s += p.choices[i] == kLayerId ? std::string("U") : std::to_string(p.choices[i]);
  }
  return s + "]";
}

/// One strict-fair round. `block_paths` holds M paths in which every layer's
/// candidates appear exactly once (M = the widest layer; narrower layers cycle a
/// fresh permutation). `layer_path`, present on odd rounds, takes the layer-indicator
/// branch in every normal layer; its reduction layers borrow a block read-only.
struct SampleRound {
  std::vector<PathSample> block_paths;
  std::optional<PathSample> layer_path;
};

/// Deterministic in (seed, round_index).
inline SampleRound fair_sample_round(const SearchSpace& space, std::uint64_t seed,
                                     std::uint64_t round_index, bool with_layer_path = true) {
  Rng rng(derive_seed(seed, round_index));
  std::size_t m_max = 0;
  for (const auto& slot : space.layers) m_max = std::max(m_max, slot.candidates.size());
  SampleRound round;
  round.block_paths.assign(m_max, PathSample{std::vector<int>(space.depth(), 0)});
  for (std::size_t l = 0; l < space.depth(); ++l) {
    const std::size_t m = space.layers[l].candidates.size();
    std::vector<int> perm(m);
    for (std::size_t i = 0; i < m_max; ++i) {
      if (i % m == 0) {
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
      }
      round.block_paths[i].choices[l] = perm[i % m];
    }
  }
  if (with_layer_path && round_index % 2 == 1) {
    PathSample p{std::vector<int>(space.depth(), kLayerId)};
    for (std::size_t l = 0; l < space.depth(); ++l) {
      if (space.layers[l].is_reduction) {
        p.choices[l] = static_cast<int>(rng.below(space.layers[l].candidates.size()));
      }
    }
    round.layer_path = std::move(p);
  }
  return round;
}

}  // namespace isonas
