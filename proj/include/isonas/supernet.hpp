#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "isonas/blocks.hpp"
#include "isonas/errors.hpp"
#include "isonas/init.hpp"
#include "isonas/sampler.hpp"
#include "isonas/search_space.hpp"
#include "isonas/tape.hpp"

namespace isonas {

struct SupernetInit {
  BlockInit block;
  Padding padding = Padding::circular;
  double head_gain = 1.0;
};

/// Frozen weight store plus trainable indicators. The stem is a frozen conv followed
/// by a frozen BN (batch statistics while training); the head is global average
/// pooling and a frozen dense layer.
struct Supernet {
  SearchSpace space;
  Padding padding = Padding::circular;
  LayerParams stem;
  BNParams stem_bn;
  std::vector<std::vector<Block>> blocks;             // [layer][candidate]
  std::vector<std::optional<BNParams>> layer_indicators;  // normal layers only
  LayerParams head;

  const Block& block(std::size_t l, std::size_t m) const { return blocks.at(l).at(m); }

  /// Every trainable indicator, block indicators first (layer-major), then layer indicators.
  std::vector<BNParams*> indicators() {
    std::vector<BNParams*> out;
    for (auto& layer : blocks)
      for (auto& b : layer) out.push_back(&b.indicator);
    for (auto& u : layer_indicators)
      if (u) out.push_back(&*u);
    return out;
  }

  std::vector<const LayerParams*> weight_layers() const {
    std::vector<const LayerParams*> out{&stem};
    for (const auto& layer : blocks)
      for (const auto& b : layer)
        for (const auto& p : b.layers) out.push_back(&p);
    out.push_back(&head);
    return out;
  }

  /// Total learnable scalars: conv/dense weights and biases plus BN gamma and beta.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : weight_layers()) n += p->weights.size() + p->bias.size();
    n += 2 * stem_bn.channels();
    for (const auto& layer : blocks)
      for (const auto& b : layer) n += 2 * b.indicator.channels();
    for (const auto& u : layer_indicators)
      if (u) n += 2 * u->channels();
    return n;
  }
};

inline void validate_path(const SearchSpace& space, const PathSample& path, bool allow_layer_id = true) {
  if (path.choices.size() != space.depth()) {
    throw ConfigError("path " + to_string(path) + " has " + std::to_string(path.choices.size()) +
                      " entries for a " + std::to_string(space.depth()) + "-layer space");
  }
  for (std::size_t l = 0; l < space.depth(); ++l) {
    const int c = path.choices[l];
    if (c == kLayerId) {
      if (!allow_layer_id || space.layers[l].is_reduction) {
        throw ConfigError("path " + to_string(path) + ": layer indicator not allowed at layer " + std::to_string(l));
      }
    } else if (c < 0 || static_cast<std::size_t>(c) >= space.layers[l].candidates.size()) {
      throw ConfigError("path " + to_string(path) + ": candidate out of range at layer " + std::to_string(l));
    }
  }
}

inline Supernet build_supernet(const SearchSpace& space, const SupernetInit& init) {
  space.validate();
  Supernet net;
  net.space = space;
  net.padding = init.padding;
  const std::size_t d = space.layers.front().channels;
  const std::uint64_t seed = init.block.seed;

  net.stem = LayerParams::conv("stem.conv", d, space.input_channels, 3);
  InitSpec stem_spec;
  stem_spec.seed = derive_seed(seed, 1000001);
  if (init.block.scheme == InitScheme::gaussian) {
    stem_spec.scheme = InitScheme::gaussian;
    stem_spec.weight_variance = init.block.gaussian_weight_variance;
  }
  init_layer(net.stem, stem_spec, ConvLayout::flattened);
  net.stem_bn = BNParams("stem.bn", d, false);

  net.blocks.resize(space.depth());
  net.layer_indicators.resize(space.depth());
  for (std::size_t l = 0; l < space.depth(); ++l) {
    const auto& slot = space.layers[l];
    net.blocks[l].reserve(slot.candidates.size());
    for (std::size_t m = 0; m < slot.candidates.size(); ++m) {
      BlockInit bi = init.block;
      bi.seed = derive_seed(seed, l * 1000 + m);
      net.blocks[l].push_back(
          build_block(slot.candidates[m], slot.channels, bi, "L" + std::to_string(l) + ".m" + std::to_string(m)));
    }
    if (!slot.is_reduction) {
      net.layer_indicators[l] = BNParams("L" + std::to_string(l) + ".layer_indicator", slot.channels, true);
    }
  }

  net.head = LayerParams::dense("head", space.num_classes, d);
  InitSpec head_spec;
  head_spec.seed = derive_seed(seed, 1000002);
  head_spec.gain = init.head_gain;
  init_layer(net.head, head_spec);
  return net;
}

struct ForwardOptions {
  BNMode mode = BNMode::train;
  /// Block indicators run on running statistics and receive no updates (used for
  /// the reduction layers of a layer-indicator path).
  bool read_only_blocks = false;
};

/// Records stem, the chosen blocks (or layer-indicator branches) and the head.
inline Node forward_path(Tape& tape, Node x, Supernet& net, const PathSample& path,
                         ForwardOptions opt = {}) {
  validate_path(net.space, path);
  Node h = tape.conv2d(x, net.stem, ConvOptions{1, net.padding});
  h = tape.batchnorm(h, net.stem_bn, opt.mode);
  for (std::size_t l = 0; l < path.choices.size(); ++l) {
    const int c = path.choices[l];
    if (c == kLayerId) {
      h = tape.batchnorm(h, *net.layer_indicators[l], opt.mode);
    } else {
      Block& b = net.blocks[l][static_cast<std::size_t>(c)];
      h = forward_block(tape, h, b, opt.read_only_blocks ? BNMode::eval : opt.mode, net.padding);
    }
  }
  h = tape.global_avg_pool(h);
  return tape.dense(h, net.head);
}

/// FNV-1a over every frozen value: conv/dense weights and biases, and the stem BN's
/// scale and shift. Running statistics are excluded.
inline std::uint64_t frozen_weight_hash(const Supernet& net) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::vector<double>& v) {
    for (double x : v) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &x, sizeof(double));
      for (unsigned char b : bytes) {
        hash ^= b;
        hash *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto* p : net.weight_layers()) {
    mix(p->weights);
    mix(p->bias);
  }
  mix(net.stem_bn.gamma);
  mix(net.stem_bn.beta);
  return hash;
}

/// Sets every BN's running statistics to the batch statistics of `x`: each candidate
/// block sees the output of candidate 0 in earlier layers (the carrier has unit
/// variance whichever block produced it).
inline void calibrate_running_stats(Supernet& net, const Tensor4& x) {
  std::vector<BNParams*> all = net.indicators();
  all.push_back(&net.stem_bn);
  std::vector<double> saved;
  for (auto* bn : all) {
    saved.push_back(bn->momentum);
    bn->momentum = 1.0;
  }
  Tape tape;
  Node h = tape.input(x);
  h = tape.conv2d(h, net.stem, ConvOptions{1, net.padding});
  h = tape.batchnorm(h, net.stem_bn, BNMode::train);
  for (std::size_t l = 0; l < net.space.depth(); ++l) {
    Node carry{};
    for (std::size_t m = 0; m < net.blocks[l].size(); ++m) {
      Node o = forward_block(tape, h, net.blocks[l][m], BNMode::train, net.padding);
      if (m == 0) carry = o;
    }
    if (net.layer_indicators[l]) tape.batchnorm(h, *net.layer_indicators[l], BNMode::train);
    h = carry;
  }
  for (std::size_t i = 0; i < all.size(); ++i) all[i]->momentum = saved[i];
}

}  // namespace isonas
