#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/layers.hpp"
#include "isonas/linalg.hpp"
#include "isonas/quadrature.hpp"
#include "isonas/random.hpp"

namespace isonas {

enum class InitScheme { orthogonal_triangular, gaussian, identity };

inline std::string_view to_string(InitScheme s) {
  switch (s) {
    case InitScheme::orthogonal_triangular: return "orthogonal-triangular";
    case InitScheme::gaussian: return "gaussian";
    case InitScheme::identity: return "identity";
  }
  return "?";
}

inline InitScheme parse_init_scheme(std::string_view s) {
  if (s == "orthogonal-triangular") return InitScheme::orthogonal_triangular;
  if (s == "gaussian") return InitScheme::gaussian;
  if (s == "identity") return InitScheme::identity;
  throw ConfigError("unknown init scheme '" + std::string(s) + "'");
}

struct InitSpec {
  InitScheme scheme = InitScheme::orthogonal_triangular;
  double gain = 1.0;
  std::uint64_t seed = 0;
  double weight_variance = 1.0;  // Gaussian draw variance (scaled by 1/fan_in in gaussian mode)
  double bias_variance = 0.0;    // biases ~ N(0, bias_variance) when the layer has them

  void validate() const {
    if (!(gain > 0.0)) throw ConfigError("init gain must be positive");
    if (!(weight_variance > 0.0)) throw ConfigError("init weight_variance must be positive");
    if (!(bias_variance >= 0.0)) throw ConfigError("init bias_variance must be non-negative");
  }
};

/// Q = F * winv with winv upper triangular, positive diagonal. When F is wide the
/// factorization is applied to F^T, so Q^T = F^T * winv and Q has orthonormal rows.
struct OrthogonalFactor {
  Matrix q;
  Matrix winv;
  bool rows_orthonormal = false;
};

namespace detail {

/// Tall or square F: Q = F * winv with orthonormal columns (CholeskyQR applied twice).
inline void cholesky_qr2(const Matrix& f, Matrix& q, Matrix& winv) {
  const Matrix r1inv = invert_upper_triangular(cholesky_upper(gram_columns(f)));
  const Matrix q1 = f * r1inv;
  const Matrix r2inv = invert_upper_triangular(cholesky_upper(gram_columns(q1)));
  q = q1 * r2inv;
  winv = r1inv * r2inv;
}

}  // namespace detail

inline OrthogonalFactor orthogonalize_triangular(const Matrix& f) {
  if (f.empty()) throw DimensionError("cannot orthogonalize an empty matrix");
  OrthogonalFactor out;
  if (f.rows() >= f.cols()) {
    detail::cholesky_qr2(f, out.q, out.winv);
    out.rows_orthonormal = f.rows() == f.cols();
  } else {
    Matrix qt;
    detail::cholesky_qr2(f.transposed(), qt, out.winv);
    out.q = qt.transposed();
    out.rows_orthonormal = true;
  }
  return out;
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

/// Uniformly distributed orthogonal matrix (n x n).
inline Matrix random_orthogonal(std::size_t n, Rng& rng) {
  return orthogonalize_triangular(gaussian_matrix(n, n, 1.0, rng)).q;
}

/// Gain g with g^2 * E[sigma'(sqrt(v*) z)^2] = 1.
inline double calibrate_gain(Activation a, double v_star) {
  if (!(v_star >= 0.0)) throw ConfigError("calibrate_gain needs v_star >= 0");
  const double s = std::sqrt(v_star);
  const double m = standard_rule().expect([&](double z) {
    const double d = activation_derivative(a, s * z);
    return d * d;
  });
  return 1.0 / std::sqrt(m);
}

/// How a conv filter bank is laid out before orthogonalization.
enum class ConvLayout {
  flattened,          // whole bank as one (out x in*r*r) matrix per group
  delta,              // orthogonal matrix at the centre tap, zeros elsewhere
  orthogonal_kernel,  // product of size-2 projection kernels; the circular conv operator is orthogonal
};

inline std::string_view to_string(ConvLayout l) {
  switch (l) {
    case ConvLayout::flattened: return "flattened";
    case ConvLayout::delta: return "delta";
    case ConvLayout::orthogonal_kernel: return "orthogonal-kernel";
  }
  return "?";
}

/// Flattened weights of group g as an (out/groups) x (in/groups * r * r) matrix.
inline Matrix flattened_group(const LayerParams& p, std::size_t g) {
  const std::size_t rows = p.out_per_group(), cols = p.fan_in();
  Matrix m(rows, cols);
  for (std::size_t o = 0; o < rows; ++o)
    for (std::size_t c = 0; c < cols; ++c) m(o, c) = p.weights[(g * rows + o) * cols + c];
  return m;
}

namespace detail {

inline void store_group(LayerParams& p, std::size_t g, const Matrix& m) {
  const std::size_t rows = p.out_per_group(), cols = p.fan_in();
  for (std::size_t o = 0; o < rows; ++o)
    for (std::size_t c = 0; c < cols; ++c) p.weights[(g * rows + o) * cols + c] = m(o, c);
}

/// Orthonormal rows or columns (whichever side is smaller) from a Gaussian draw.
inline Matrix semi_orthogonal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  return orthogonalize_triangular(gaussian_matrix(rows, cols, stddev, rng)).q;
}

/// k x k grid of d x d matrices; (A * B)[t] = sum_s A[s] B[t - s].
using KernelGrid = std::vector<std::vector<Matrix>>;

inline KernelGrid convolve_kernels(const KernelGrid& a, const KernelGrid& b) {
  const std::size_t ah = a.size(), aw = a[0].size(), bh = b.size(), bw = b[0].size();
  const std::size_t d = a[0][0].rows();
  KernelGrid c(ah + bh - 1, std::vector<Matrix>(aw + bw - 1, Matrix(d, d)));
  for (std::size_t i = 0; i < ah; ++i)
    for (std::size_t j = 0; j < aw; ++j)
      for (std::size_t k = 0; k < bh; ++k)
        for (std::size_t l = 0; l < bw; ++l) {
          const Matrix prod = a[i][j] * b[k][l];
          auto dst = c[i + k][j + l].data();
          auto src = prod.data();
          for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
        }
  return c;
}

/// Size-2 factor [P, I - P] along one axis, P a random rank-floor(d/2) projection.
inline KernelGrid projection_factor(std::size_t d, bool along_x, Rng& rng) {
  const Matrix u = random_orthogonal(d, rng);
  Matrix p(d, d);
  const std::size_t rank = d / 2;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < rank; ++k) s += u(i, k) * u(j, k);
      p(i, j) = s;
    }
  Matrix ip = Matrix::identity(d) - p;
  if (along_x) return KernelGrid{{p, ip}};
  return KernelGrid{{p}, {ip}};
}

}  // namespace detail

/// Whole-bank orthogonal conv (or dense) weights: the flattened matrix has
/// orthonormal rows (or columns when tall) scaled by spec.gain.
inline LayerParams init_conv_orthogonal(const InitSpec& spec, std::size_t d_out, std::size_t d_in,
                                        std::size_t r, std::string name = "conv") {
  spec.validate();
  LayerParams p = LayerParams::conv(std::move(name), d_out, d_in, r);
  Rng rng(spec.seed);
  Matrix q = detail::semi_orthogonal(d_out, d_in * r * r, std::sqrt(spec.weight_variance), rng);
  q *= spec.gain;
  detail::store_group(p, 0, q);
  return p;
}

/// Fill an existing conv or dense layer according to `spec` and `layout`.
inline void init_layer(LayerParams& p, const InitSpec& spec, ConvLayout layout = ConvLayout::flattened) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t rows = p.out_per_group(), cols = p.fan_in();
  const std::size_t k = p.kind == LayerKind::conv ? p.kernel : 1;
  std::fill(p.weights.begin(), p.weights.end(), 0.0);
  switch (spec.scheme) {
    case InitScheme::gaussian: {
      const double sd = spec.gain * std::sqrt(spec.weight_variance / static_cast<double>(cols));
      for (double& w : p.weights) w = sd * rng.normal();
      break;
    }
    case InitScheme::identity: {
      if (rows != p.in_per_group()) throw DimensionError("identity init of '" + p.name + "' needs square groups");
      for (std::size_t g = 0; g < p.groups; ++g)
        for (std::size_t o = 0; o < rows; ++o) {
          if (p.kind == LayerKind::dense) {
            p.weights[o * cols + o] = spec.gain;
          } else {
            p.w(g * rows + o, o, k / 2, k / 2) = spec.gain;
          }
        }
      break;
    }
    case InitScheme::orthogonal_triangular: {
      const double sd = std::sqrt(spec.weight_variance);
      if (layout == ConvLayout::flattened || p.kind == LayerKind::dense || k == 1) {
        for (std::size_t g = 0; g < p.groups; ++g) {
          Matrix q = detail::semi_orthogonal(rows, cols, sd, rng);
          q *= spec.gain;
          detail::store_group(p, g, q);
        }
      } else if (layout == ConvLayout::delta) {
        const std::size_t ipg = p.in_per_group();
        if (rows > ipg) {
          throw DimensionError("delta init of '" + p.name + "' needs at most as many outputs as inputs per group; "
                               "a single tap cannot hold " + std::to_string(rows) + " orthonormal rows");
        }
        for (std::size_t g = 0; g < p.groups; ++g) {
          const Matrix q = detail::semi_orthogonal(rows, ipg, sd, rng);
          for (std::size_t o = 0; o < rows; ++o)
            for (std::size_t i = 0; i < ipg; ++i) p.w(g * rows + o, i, k / 2, k / 2) = spec.gain * q(o, i);
        }
      } else {
        if (p.groups != 1 || p.out_channels != p.in_channels) {
          throw DimensionError("orthogonal-kernel init of '" + p.name + "' needs equal in/out channels and one group");
        }
        const std::size_t d = p.out_channels;
        detail::KernelGrid grid{{random_orthogonal(d, rng)}};
        for (std::size_t t = 1; t < k; ++t) grid = detail::convolve_kernels(grid, detail::projection_factor(d, true, rng));
        for (std::size_t t = 1; t < k; ++t) grid = detail::convolve_kernels(grid, detail::projection_factor(d, false, rng));
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx)
            for (std::size_t o = 0; o < d; ++o)
              for (std::size_t i = 0; i < d; ++i) p.w(o, i, ky, kx) = spec.gain * grid[ky][kx](o, i);
      }
      break;
    }
  }
  if (p.has_bias()) {
    const double sb = std::sqrt(spec.bias_variance);
    for (double& b : p.bias) b = sb > 0.0 ? sb * rng.normal() : 0.0;
  }
}

/// Largest deviation of the smaller Gram matrix of each flattened group from gain^2 * I.
inline double orthogonality_defect(const LayerParams& p, double gain) {
  double worst = 0.0;
  for (std::size_t g = 0; g < p.groups; ++g) {
    const Matrix m = flattened_group(p, g);
    const Matrix gram = m.rows() <= m.cols() ? gram_rows(m) : gram_columns(m);
    Matrix target = Matrix::identity(gram.rows());
    target *= gain * gain;
    worst = std::max(worst, max_abs_diff(gram, target));
  }
  return worst;
}

}  // namespace isonas
