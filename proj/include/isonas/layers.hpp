#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "isonas/errors.hpp"

namespace isonas {

enum class Activation { identity, tanh, relu };

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

/// d sigma / dx evaluated at the pre-activation x.
inline double activation_derivative(Activation a, double x) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

enum class LayerKind { conv, dense };

/// Weights of one convolution (square r x r kernel, optional groups) or dense layer.
///
/// Conv weights are laid out (out, in/groups, r, r). Dense weights are (out, in)
/// where `in` is the flattened C*H*W feature count of the input.
struct LayerParams {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel = 1;
  std::size_t groups = 1;
  std::vector<double> weights;
  std::vector<double> bias;  // empty when the layer is bias-free
  bool frozen = true;

  static LayerParams conv(std::string name, std::size_t out, std::size_t in, std::size_t kernel,
                          std::size_t groups = 1, bool with_bias = false) {
    if (groups == 0 || in % groups != 0 || out % groups != 0) {
      throw DimensionError("conv '" + name + "': channels not divisible by groups");
    }
    LayerParams p;
    p.name = std::move(name);
    p.kind = LayerKind::conv;
    p.out_channels = out;
    p.in_channels = in;
    p.kernel = kernel;
    p.groups = groups;
    p.weights.assign(out * (in / groups) * kernel * kernel, 0.0);
    if (with_bias) p.bias.assign(out, 0.0);
    return p;
  }

  static LayerParams dense(std::string name, std::size_t out, std::size_t in, bool with_bias = false) {
    LayerParams p;
    p.name = std::move(name);
    p.kind = LayerKind::dense;
    p.out_channels = out;
    p.in_channels = in;
    p.weights.assign(out * in, 0.0);
    if (with_bias) p.bias.assign(out, 0.0);
    return p;
  }

  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  std::size_t fan_in() const { return in_per_group() * kernel * kernel; }
  bool has_bias() const { return !bias.empty(); }

  double& w(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    return weights[((o * in_per_group() + i) * kernel + ky) * kernel + kx];
  }
  double w(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const {
    return weights[((o * in_per_group() + i) * kernel + ky) * kernel + kx];
  }
};

/// Batch-normalization scale/shift plus running statistics.
struct BNParams {
  std::string name;
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  bool trainable = true;

  BNParams() = default;
  BNParams(std::string name, std::size_t channels, bool trainable = true, double eps = 1e-5)
      : name(std::move(name)),
        gamma(channels, 1.0),
        beta(channels, 0.0),
        running_mean(channels, 0.0),
        running_var(channels, 1.0),
        eps(eps),
        trainable(trainable) {
    if (!(eps > 0.0)) throw ConfigError("batchnorm '" + this->name + "': eps must be positive");
  }

  std::size_t channels() const { return gamma.size(); }
};

}  // namespace isonas
