#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "isonas/errors.hpp"
#include "isonas/linalg.hpp"
#include "isonas/random.hpp"
#include "isonas/tape.hpp"
#include "isonas/tensor.hpp"

namespace isonas {

/// A differentiable map recorded onto a tape.
using BlockFn = std::function<Node(Tape&, Node)>;

inline constexpr std::size_t kMaxDenseJacobian = 4096;

/// Exact dense Jacobian d(block(x))/dx, rows = output coordinates. Sweeps
/// whichever side (tangent columns or cotangent rows) is smaller.
inline Matrix jacobian_of(const BlockFn& block, const Tensor4& x) {
  Tape tape;
  const Node in = tape.input(x);
  const Node out = block(tape, in);
  const Tensor4& y = tape.value(out);
  const std::size_t n_in = x.size(), n_out = y.size();
  if (n_in > kMaxDenseJacobian || n_out > kMaxDenseJacobian) {
    throw DimensionError("Jacobian of size " + std::to_string(n_out) + "x" + std::to_string(n_in) +
                         " exceeds the dense limit of " + std::to_string(kMaxDenseJacobian) +
                         "; use estimate_jjt_moments for stochastic trace estimation");
  }
  Matrix j(n_out, n_in);
  if (n_in <= n_out) {
    Tensor4 e(x.shape());
    for (std::size_t c = 0; c < n_in; ++c) {
      e[c] = 1.0;
      const Tensor4 col = tape.jvp(out, in, e);
      e[c] = 0.0;
      for (std::size_t r = 0; r < n_out; ++r) j(r, c) = col[r];
    }
  } else {
    Tensor4 e(y.shape());
    for (std::size_t r = 0; r < n_out; ++r) {
      e[r] = 1.0;
      const Tensor4 row = tape.vjp(out, e, in);
      e[r] = 0.0;
      std::ranges::copy(row.data(), j.row(r).begin());
    }
  }
  return j;
}

/// Normalized spectral moments of J J^T estimated without materializing J.
struct MomentEstimate {
  double phi = 0.0;         // tr(J J^T) / w
  double phi2 = 0.0;        // tr((J J^T)^2) / w
  double phi_stderr = 0.0;  // standard error of phi across probes
  double phi2_stderr = 0.0;
  std::size_t width = 0;    // w = output dimension
  std::size_t probes = 0;
};

/// Hutchinson estimates with Gaussian probes v: E[v^T J J^T v] = tr(J J^T) and
/// E[|J J^T v|^2] = tr((J J^T)^2). Each probe costs one reverse and one tangent sweep.
inline MomentEstimate estimate_jjt_moments(const BlockFn& block, const Tensor4& x,
                                           std::size_t probes, Rng& rng) {
  if (probes < 2) throw DimensionError("need at least two probes for a standard error");
  Tape tape;
  const Node in = tape.input(x);
  const Node out = block(tape, in);
  const Shape4 out_shape = tape.value(out).shape();
  const double w = static_cast<double>(out_shape.size());
  double s1 = 0.0, s1sq = 0.0, s2 = 0.0, s2sq = 0.0;
  for (std::size_t k = 0; k < probes; ++k) {
    Tensor4 v(out_shape);
    for (double& e : v.data()) e = rng.normal();
    const Tensor4 u = tape.vjp(out, v, in);   // J^T v
    const Tensor4 ju = tape.jvp(out, in, u);  // J J^T v
    const double a = u.squared_norm() / w;
    const double b = ju.squared_norm() / w;
    s1 += a;
    s1sq += a * a;
    s2 += b;
    s2sq += b * b;
  }
  const double n = static_cast<double>(probes);
  MomentEstimate m;
  m.phi = s1 / n;
  m.phi2 = s2 / n;
  m.phi_stderr = std::sqrt(std::max(0.0, (s1sq / n - m.phi * m.phi) / (n - 1.0)));
  m.phi2_stderr = std::sqrt(std::max(0.0, (s2sq / n - m.phi2 * m.phi2) / (n - 1.0)));
  m.width = out_shape.size();
  m.probes = probes;
  return m;
}

}  // namespace isonas
