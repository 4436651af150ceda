#pragma once

#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/init.hpp"
#include "isonas/jacobian.hpp"
#include "isonas/layers.hpp"
#include "isonas/linalg.hpp"
#include "isonas/quadrature.hpp"
#include "isonas/random.hpp"

namespace isonas {

/// Pre-activation variance recursion v' = v_W * E[sigma(sqrt(v) z)^2] + v_b.
struct VarianceMap {
  double weight_variance = 1.0;
  double bias_variance = 0.0;
  Activation activation = Activation::tanh;
  std::size_t quadrature_nodes = 64;

  void validate() const {
    if (!(weight_variance > 0.0)) throw ConfigError("variance map needs v_W > 0");
    if (!(bias_variance >= 0.0)) throw ConfigError("variance map needs v_b >= 0");
    if (quadrature_nodes < 32) throw ConfigError("variance map needs at least 32 quadrature nodes");
  }
};

namespace detail {

inline const GaussHermite& rule_for(std::size_t nodes) {
  if (nodes == 64) return standard_rule();
  thread_local std::size_t cached_n = 0;
  thread_local GaussHermite cached(2);
  if (cached_n != nodes) {
    cached = GaussHermite(nodes);
    cached_n = nodes;
  }
  return cached;
}

}  // namespace detail

/// E[f(sqrt(v) z)] over z ~ N(0, 1).
template <class F>
double gaussian_expectation(double v, F&& f, std::size_t nodes = 64) {
  const double s = std::sqrt(v);
  return detail::rule_for(nodes).expect([&](double z) { return f(s * z); });
}

inline double variance_step(double v_in, const VarianceMap& map) {
  if (!(v_in >= 0.0)) throw ConfigError("variance_step needs v_in >= 0");
  const double e = gaussian_expectation(
      v_in, [&](double h) { const double a = activate(map.activation, h); return a * a; },
      map.quadrature_nodes);
  return map.weight_variance * e + map.bias_variance;
}

struct FixedPoint {
  double v_star = 0.0;
  std::size_t iterations = 0;
  double residual = 0.0;
};

/// Plain iteration of the variance map until successive iterates differ by < tol.
inline FixedPoint solve_fixed_point(const VarianceMap& map, double v0, double tol = 1e-10,
                                    std::size_t max_iterations = 10000) {
  map.validate();
  if (!(v0 >= 0.0)) throw ConfigError("solve_fixed_point needs v0 >= 0");
  double v = v0;
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    const double next = variance_step(v, map);
    if (!std::isfinite(next)) throw ConvergenceError("variance map diverged", v);
    const double delta = std::abs(next - v);
    v = next;
    if (delta < tol) {
      return FixedPoint{v, it, std::abs(variance_step(v, map) - v)};
    }
  }
  throw ConvergenceError("variance map did not converge in " + std::to_string(max_iterations) +
                             " iterations",
                         v);
}

/// Mean squared singular value of D W at the fixed point: v_W * E[sigma'(sqrt(v*) z)^2].
inline double chi(const VarianceMap& map, double v_star) {
  return map.weight_variance * gaussian_expectation(
                                   v_star,
                                   [&](double h) {
                                     const double d = activation_derivative(map.activation, h);
                                     return d * d;
                                   },
                                   map.quadrature_nodes);
}

/// E[sigma'(sqrt(v*) z)^2]: the fraction of units in the linear regime, read as a
/// continuous quantity.
inline double estimate_p_linear(Activation a, double v_star) {
  if (!(v_star >= 0.0)) throw ConfigError("estimate_p_linear needs v_star >= 0");
  return gaussian_expectation(v_star, [&](double h) {
    const double d = activation_derivative(a, h);
    return d * d;
  });
}

/// Weight gain and bias variance that make v_star a fixed point with chi = 1.
struct CriticalPoint {
  double v_star = 0.0;
  double gain = 1.0;
  double weight_variance = 1.0;  // gain^2
  double bias_variance = 0.0;
};

inline CriticalPoint critical_point(Activation a, double v_star) {
  CriticalPoint cp;
  cp.v_star = v_star;
  cp.gain = calibrate_gain(a, v_star);
  cp.weight_variance = cp.gain * cp.gain;
  const double m2 = gaussian_expectation(v_star, [&](double h) {
    const double s = activate(a, h);
    return s * s;
  });
  cp.bias_variance = v_star - cp.weight_variance * m2;
  if (cp.bias_variance < 0.0) {
    if (cp.bias_variance < -1e-12 * std::max(1.0, v_star)) {
      throw ConfigError("no critical bias variance for v* = " + std::to_string(v_star));
    }
    cp.bias_variance = 0.0;
  }
  return cp;
}

struct SpectralStats {
  double phi = 0.0;        // tr(J J^T) / w
  double phi2 = 0.0;       // tr((J J^T)^2) / w
  double trace_var = 0.0;  // phi2 - phi^2
  std::size_t width = 0;

  /// phi2 / phi^2 - 1: spread of the spectrum relative to its mean.
  double normalized_var() const { return phi > 0.0 ? phi2 / (phi * phi) - 1.0 : 0.0; }
};

inline SpectralStats spectral_stats(const Matrix& j) {
  if (j.empty()) throw DimensionError("spectral_stats of an empty Jacobian");
  const Matrix jjt = gram_rows(j);
  const double w = static_cast<double>(j.rows());
  double tr = 0.0, tr2 = 0.0;
  for (std::size_t i = 0; i < jjt.rows(); ++i) tr += jjt(i, i);
  for (double v : jjt.data()) tr2 += v * v;  // tr(A^2) = |A|_F^2 for symmetric A
  SpectralStats s;
  s.phi = tr / w;
  s.phi2 = tr2 / w;
  s.trace_var = s.phi2 - s.phi * s.phi;
  s.width = j.rows();
  return s;
}

inline SpectralStats spectral_stats(const MomentEstimate& m) {
  SpectralStats s;
  s.phi = m.phi;
  s.phi2 = m.phi2;
  s.trace_var = m.phi2 - m.phi * m.phi;
  s.width = m.width;
  return s;
}

struct IsometryVerdict {
  bool pass = false;
  double phi_margin = 0.0;  // tol_phi - |phi - 1|; negative when violated
  double var_margin = 0.0;  // tol_var - trace_var
};

inline IsometryVerdict check_isometry(const SpectralStats& s, double tol_phi = 0.05,
                                      double tol_var = 0.05) {
  IsometryVerdict v;
  v.phi_margin = tol_phi - std::abs(s.phi - 1.0);
  v.var_margin = tol_var - s.trace_var;
  v.pass = v.phi_margin >= 0.0 && v.var_margin >= 0.0;
  return v;
}

/// Closed-form moments of the Jacobian spectrum of a depth-L Gaussian network.
struct GaussianMoments {
  double m1 = 0.0;
  double m2 = 0.0;
  double variance = 0.0;  // m2 - m1^2
  std::size_t depth = 0;
  double p_linear = 1.0;
};

inline GaussianMoments gaussian_moments(double weight_variance, double p_linear, std::size_t depth) {
  if (!(p_linear > 0.0 && p_linear <= 1.0)) throw ConfigError("p_linear must lie in (0, 1]");
  if (depth < 1) throw ConfigError("depth must be at least 1");
  GaussianMoments g;
  const double base = std::pow(weight_variance * p_linear, static_cast<double>(depth));
  const double L = static_cast<double>(depth);
  g.m1 = base;
  g.m2 = base * base * (L + p_linear) / p_linear;
  g.variance = base * base * L / p_linear;
  g.depth = depth;
  g.p_linear = p_linear;
  return g;
}

/// Spectral moments of the input-output Jacobian of a depth-L dense network at a
/// critical point, computed exactly: J = prod_l D_l W_l with D_l = diag(sigma'(h_l)).
/// `orthogonal` selects scaled orthogonal weights instead of Gaussian ones.
inline SpectralStats deep_product_moments(bool orthogonal, Activation a, std::size_t width,
                                          std::size_t depth, const CriticalPoint& cp, Rng& rng) {
  if (width == 0 || depth == 0) throw ConfigError("deep_product_moments needs width, depth > 0");
  const double sd_w = cp.gain / std::sqrt(static_cast<double>(width));
  const double sd_b = std::sqrt(cp.bias_variance);
  std::vector<double> h(width), x(width), next(width);
  for (double& v : h) v = std::sqrt(cp.v_star) * rng.normal();
  Matrix j = Matrix::identity(width);
  for (std::size_t l = 0; l < depth; ++l) {
    Matrix w = orthogonal ? random_orthogonal(width, rng) : gaussian_matrix(width, width, sd_w, rng);
    if (orthogonal) w *= cp.gain;
    for (std::size_t i = 0; i < width; ++i) x[i] = activate(a, h[i]);
    // The Jacobian of h_{l+1} = W sigma(h_l) + b w.r.t. h_l is W diag(sigma'(h_l)).
    Matrix wd = w;
    for (std::size_t r = 0; r < width; ++r)
      for (std::size_t c = 0; c < width; ++c) wd(r, c) *= activation_derivative(a, h[c]);
    j = wd * j;
    for (std::size_t r = 0; r < width; ++r) {
      double acc = sd_b * rng.normal();
      for (std::size_t c = 0; c < width; ++c) acc += w(r, c) * x[c];
      next[r] = acc;
    }
    h.swap(next);
  }
  return spectral_stats(j);
}

/// CSV: weight_variance,bias_variance,v_star,chi (one row per grid point; empty v_star
/// and chi where the iteration failed).
inline void write_phase_diagram_csv(std::ostream& os, Activation a,
                                    std::span<const double> weight_variances,
                                    std::span<const double> bias_variances) {
  os << "weight_variance,bias_variance,v_star,chi\n";
  for (double vw : weight_variances) {
    for (double vb : bias_variances) {
      VarianceMap map{vw, vb, a, 64};
      os << vw << ',' << vb << ',';
      try {
        const auto fp = solve_fixed_point(map, 1.0);
        os << fp.v_star << ',' << chi(map, fp.v_star) << '\n';
      } catch (const ConvergenceError&) {
        os << ",\n";
      }
    }
  }
}

struct SpectrumRow {
  std::string module;
  SpectralStats stats;
  bool pass = false;
};

/// CSV: module,phi,phi2,trace_var,width,pass
inline void write_spectrum_csv(std::ostream& os, std::span<const SpectrumRow> rows) {
  os << "module,phi,phi2,trace_var,width,pass\n";
  for (const auto& r : rows) {
    os << r.module << ',' << r.stats.phi << ',' << r.stats.phi2 << ',' << r.stats.trace_var << ','
       << r.stats.width << ',' << (r.pass ? 1 : 0) << '\n';
  }
}

}  // namespace isonas
