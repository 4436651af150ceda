#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/layers.hpp"

namespace isonas {

enum class BlockKind { mbconv, shuffle, shuffle_xception, plain_conv };

inline std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::mbconv: return "mbconv";
    case BlockKind::shuffle: return "shuffle";
    case BlockKind::shuffle_xception: return "shuffle-xception";
    case BlockKind::plain_conv: return "plain-conv";
  }
  return "?";
}

inline BlockKind parse_block_kind(std::string_view s) {
  if (s == "mbconv") return BlockKind::mbconv;
  if (s == "shuffle") return BlockKind::shuffle;
  if (s == "shuffle-xception") return BlockKind::shuffle_xception;
  if (s == "plain-conv") return BlockKind::plain_conv;
  throw ConfigError("unknown block kind '" + std::string(s) + "'");
}

struct BlockTemplate {
  BlockKind kind = BlockKind::plain_conv;
  std::size_t kernel = 3;
  std::size_t expansion = 3;  // mbconv only
  std::size_t stride = 1;
  Activation activation = Activation::tanh;

  friend bool operator==(const BlockTemplate&, const BlockTemplate&) = default;
};

inline std::string describe(const BlockTemplate& t) {
  std::string s(to_string(t.kind));
  s += "-k" + std::to_string(t.kernel);
  if (t.kind == BlockKind::mbconv) s += "-e" + std::to_string(t.expansion);
  if (t.stride != 1) s += "-s" + std::to_string(t.stride);
  return s;
}

struct LayerSlot {
  bool is_reduction = false;
  std::vector<BlockTemplate> candidates;
  std::size_t channels = 0;

  friend bool operator==(const LayerSlot&, const LayerSlot&) = default;
};

/// Layered grid of candidate blocks plus the input geometry the blocks run on.
struct SearchSpace {
  std::vector<LayerSlot> layers;
  std::size_t input_channels = 1;
  std::size_t input_size = 16;  // square input side n
  std::size_t num_classes = 2;

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;

  std::size_t depth() const { return layers.size(); }

  /// Feature-map side entering layer l.
  std::size_t feature_size(std::size_t l) const {
    std::size_t n = input_size;
    for (std::size_t i = 0; i < l && i < layers.size(); ++i)
      if (layers[i].is_reduction) n = (n + 1) / 2;
    return n;
  }

  /// Product of candidate counts; saturates at UINT64_MAX.
  std::uint64_t size() const {
    std::uint64_t s = 1;
    for (const auto& slot : layers) {
      const auto m = static_cast<std::uint64_t>(slot.candidates.size());
      if (m != 0 && s > UINT64_MAX / m) return UINT64_MAX;
      s *= m;
    }
    return s;
  }

  std::size_t normal_layer_count() const {
    std::size_t c = 0;
    for (const auto& slot : layers) c += slot.is_reduction ? 0 : 1;
    return c;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("search space has no layers");
    if (normal_layer_count() == 0) throw ConfigError("search space needs at least one normal layer");
    if (input_channels == 0 || input_size == 0) throw ConfigError("search space input geometry is empty");
    if (num_classes < 2) throw ConfigError("search space needs at least two classes");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& slot = layers[l];
      const std::string where = "layer slot " + std::to_string(l);
      if (slot.candidates.empty()) throw ConfigError(where + " has no candidates");
      if (slot.channels < 2 || slot.channels % 2 != 0) {
        throw ConfigError(where + ": channel count must be even and at least 2");
      }
      if (l > 0 && slot.channels != layers[l - 1].channels) {
        throw ConfigError(where + ": " + std::to_string(slot.channels) +
                          " channels do not match the previous slot's " +
                          std::to_string(layers[l - 1].channels));
      }
      const std::size_t n = feature_size(l);
      for (std::size_t m = 0; m < slot.candidates.size(); ++m) {
        const auto& t = slot.candidates[m];
        const std::string who = where + " candidate " + std::to_string(m) + " (" + describe(t) + ")";
        if (t.kernel % 2 == 0 || t.kernel < 1) throw ConfigError(who + ": kernel must be odd");
        if (t.kernel >= n) {
          throw ConfigError(who + ": kernel must be smaller than the " + std::to_string(n) +
                            "-wide feature map");
        }
        if (t.stride != (slot.is_reduction ? 2u : 1u)) {
          throw ConfigError(who + ": stride must be " + (slot.is_reduction ? "2" : "1") +
                            (slot.is_reduction ? " in reduction layers" : " in normal layers"));
        }
        if (t.kind == BlockKind::mbconv && t.expansion < 1) throw ConfigError(who + ": expansion must be >= 1");
      }
    }
  }
};

/// Standard candidate set: mbconv k in {3,5,7} x e in {3,6} plus shuffle variants,
/// trimmed to the first `m` entries.
inline std::vector<BlockTemplate> default_candidates(std::size_t m, std::size_t stride) {
  std::vector<BlockTemplate> all;
  for (std::size_t k : {3, 5, 7})
    for (std::size_t e : {3, 6}) all.push_back({BlockKind::mbconv, k, e, stride, Activation::tanh});
  for (std::size_t k : {3, 5, 7}) all.push_back({BlockKind::shuffle, k, 1, stride, Activation::tanh});
  all.push_back({BlockKind::shuffle_xception, 3, 1, stride, Activation::tanh});
  if (m > all.size()) throw ConfigError("at most " + std::to_string(all.size()) + " default candidates");
  all.resize(m);
  return all;
}

}  // namespace isonas
