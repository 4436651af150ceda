#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "isonas/errors.hpp"

namespace isonas {

/// Gauss-Hermite rule in probabilists' form: E[f(z)] ~ sum_i weights[i] * f(nodes[i]), z ~ N(0, 1).
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;

  explicit GaussHermite(std::size_t n) : nodes(n), weights(n) {
    if (n < 2) throw ConfigError("Gauss-Hermite rule needs at least 2 nodes");
    // Newton iteration on the orthonormal Hermite recurrence (physicists' weight e^{-x^2}).
    const double pim4 = 1.0 / std::pow(std::numbers::pi, 0.25);
    const auto nd = static_cast<double>(n);
    std::vector<double> x(n), w(n);
    double z = 0.0;
    for (std::size_t i = 0; i < (n + 1) / 2; ++i) {
      if (i == 0) {
        z = std::sqrt(2.0 * nd + 1.0) - 1.85575 * std::pow(2.0 * nd + 1.0, -0.16667);
      } else if (i == 1) {
        z -= 1.14 * std::pow(nd, 0.426) / z;
      } else if (i == 2) {
        z = 1.86 * z - 0.86 * x[0];
      } else if (i == 3) {
        z = 1.91 * z - 0.91 * x[1];
      } else {
        z = 2.0 * z - x[i - 2];
      }
      double pp = 0.0;
      bool converged = false;
      for (int it = 0; it < 100; ++it) {
        double p1 = pim4, p2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double p3 = p2;
          p2 = p1;
          const auto jd = static_cast<double>(j);
          p1 = z * std::sqrt(2.0 / (jd + 1.0)) * p2 - std::sqrt(jd / (jd + 1.0)) * p3;
        }
        pp = std::sqrt(2.0 * nd) * p2;
        const double z1 = z;
        z = z1 - p1 / pp;
        if (std::abs(z - z1) <= 1e-14 * std::max(1.0, std::abs(z))) {
          converged = true;
          break;
        }
      }
      if (!converged) throw ConvergenceError("Gauss-Hermite root " + std::to_string(i), z);
      x[i] = z;
      x[n - 1 - i] = -z;
      w[i] = w[n - 1 - i] = 2.0 / (pp * pp);
    }
    // Substitute x = z / sqrt(2) and normalize by sqrt(pi).
    for (std::size_t i = 0; i < n; ++i) {
      nodes[i] = std::numbers::sqrt2 * x[i];
      weights[i] = w[i] / std::sqrt(std::numbers::pi);
    }
  }

  template <class F>
  double expect(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
    return s;
  }
};

/// Shared 64-node rule.
inline const GaussHermite& standard_rule() {
  static const GaussHermite rule(64);
  return rule;
}

}  // namespace isonas
