#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "isonas/errors.hpp"
#include "isonas/init.hpp"
#include "isonas/linalg.hpp"
#include "isonas/random.hpp"
#include "isonas/tensor.hpp"

namespace isonas {

/// One conv filter of shape (d, r, r).
struct Filter {
  std::size_t channels = 0;
  std::size_t size = 0;
  std::vector<double> w;

  Filter() = default;
  Filter(std::size_t d, std::size_t r) : channels(d), size(r), w(d * r * r, 0.0) {}
  double& operator()(std::size_t c, std::size_t a, std::size_t b) { return w[(c * size + a) * size + b]; }
  double operator()(std::size_t c, std::size_t a, std::size_t b) const { return w[(c * size + a) * size + b]; }
};

namespace detail {

inline void check_single_image(const Tensor4& h, std::size_t r) {
  const auto& s = h.shape();
  if (s.batch != 1) throw DimensionError("expected a single image");
  if (s.height != s.width) throw DimensionError("expected a square image");
  if (r >= s.height) {
    throw DimensionError("filter size " + std::to_string(r) + " must be smaller than the " +
                         std::to_string(s.height) + "-wide image");
  }
}

inline std::size_t wrap(std::ptrdiff_t i, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  return static_cast<std::size_t>(((i % m) + m) % m);
}

}  // namespace detail

/// Patch inner products <F, [h]_ij> over Z_n x Z_n: the r x r x d window of h
/// centred on (i, j) with wrap-around indexing. Returns the n x n map row-major.
inline std::vector<double> cyclic_conv(const Tensor4& h, const Filter& f) {
  detail::check_single_image(h, f.size);
  if (h.shape().channels != f.channels) throw DimensionError("filter and image channel counts differ");
  const std::size_t n = h.shape().height, r = f.size, d = f.channels;
  const auto pad = static_cast<std::ptrdiff_t>(r / 2);
  std::vector<double> out(n * n, 0.0);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t a = 0; a < r; ++a)
      for (std::size_t b = 0; b < r; ++b) {
        const double w = f(c, a, b);
        if (w == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t y = detail::wrap(static_cast<std::ptrdiff_t>(i + a) - pad, n);
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t x = detail::wrap(static_cast<std::ptrdiff_t>(j + b) - pad, n);
            out[i * n + j] += w * h(0, c, y, x);
          }
        }
      }
  return out;
}

/// Largest Euclidean norm over all r x r x d cyclic patches of h.
inline double max_patch_norm(const Tensor4& h, std::size_t r) {
  detail::check_single_image(h, r);
  const std::size_t n = h.shape().height, d = h.shape().channels;
  const auto pad = static_cast<std::ptrdiff_t>(r / 2);
  double best = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t a = 0; a < r; ++a)
          for (std::size_t b = 0; b < r; ++b) {
            const double v = h(0, c, detail::wrap(static_cast<std::ptrdiff_t>(i + a) - pad, n),
                               detail::wrap(static_cast<std::ptrdiff_t>(j + b) - pad, n));
            s += v * v;
          }
      best = std::max(best, std::sqrt(s));
    }
  return best;
}

/// R = max(max_ij |[x]_ij| (v_h - eps)^(-1/2), max_ij |[y]_ij| (v_h' - eps)^(-1/2)).
inline double compute_R(const Tensor4& h, const Tensor4& h2, double v_h, double v_h2, double eps, std::size_t r) {
  if (!(v_h > eps) || !(v_h2 > eps)) {
    throw ConfigError("compute_R needs variances above eps: the (v - eps)^(-1/2) factor is undefined otherwise "
                      "(the normalizing denominator is read as v + eps elsewhere)");
  }
  return std::max(max_patch_norm(h, r) / std::sqrt(v_h - eps), max_patch_norm(h2, r) / std::sqrt(v_h2 - eps));
}

/// Gaussian filter with entries N(0, v^2).
inline Filter gaussian_filter(std::size_t d, std::size_t r, double v, Rng& rng) {
  Filter f(d, r);
  for (double& x : f.w) x = v * rng.normal();
  return f;
}

/// Orthogonalizes one filter: reshaped to an r x (r d) matrix (rows = kernel rows),
/// Q = triangular factor of it, rescaled by v sqrt(r d) so that E|Q|^2 = E|F|^2.
inline Filter orthogonalize_filter(const Filter& f, double v) {
  const std::size_t d = f.channels, r = f.size;
  Matrix m(r, r * d);
  for (std::size_t a = 0; a < r; ++a)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t b = 0; b < r; ++b) m(a, c * r + b) = f(c, a, b);
  Matrix q = orthogonalize_triangular(m).q;
  const double scale = v * std::sqrt(static_cast<double>(r * d));
  Filter out(d, r);
  for (std::size_t a = 0; a < r; ++a)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t b = 0; b < r; ++b) out(c, a, b) = scale * q(a, c * r + b);
  return out;
}

struct OrliczEstimate {
  int order = 2;
  double norm = 0.0;
  std::size_t samples = 0;
};

inline constexpr std::size_t kMinOrliczSamples = 10000;

/// inf{t > 0 : mean(exp((|x|/t)^p) - 1) <= 1} by bisection on the empirical mean.
inline OrliczEstimate estimate_orlicz(std::span<const double> samples, int p, double t_max = 1e12) {
  if (p != 1 && p != 2) throw ConfigError("Orlicz order must be 1 or 2");
  if (samples.size() < kMinOrliczSamples) {
    throw ConfigError("Orlicz estimation needs at least " + std::to_string(kMinOrliczSamples) + " samples");
  }
  OrliczEstimate est{p, 0.0, samples.size()};
  double xmax = 0.0;
  for (double x : samples) {
    if (!std::isfinite(x)) throw NumericError("non-finite Orlicz sample");
    xmax = std::max(xmax, std::abs(x));
  }
  if (xmax == 0.0) return est;
  auto excess = [&](double t) {
    double s = 0.0;
    for (double x : samples) {
      const double u = std::abs(x) / t;
      s += std::expm1(p == 1 ? u : u * u);
    }
    return s / static_cast<double>(samples.size());
  };
  // At t = max|x| / (ln 2)^(1/p) every term is at most 1, so the bound holds there.
  double hi = xmax / (p == 1 ? std::log(2.0) : std::sqrt(std::log(2.0)));
  if (hi > t_max) throw ConvergenceError("Orlicz norm exceeds the search range (heavy tail)", hi);
  double lo = hi * 1e-9;
  for (int it = 0; it < 200 && (hi - lo) > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (excess(mid) <= 1.0) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  est.norm = hi;
  return est;
}

/// Pool-adjacent-violators fit of a nonincreasing sequence; returns the fitted values.
inline std::vector<double> isotonic_nonincreasing(std::span<const double> y) {
  std::vector<double> level;
  std::vector<std::size_t> count;
  for (double v : y) {
    level.push_back(v);
    count.push_back(1);
    while (level.size() > 1 && level[level.size() - 2] < level.back()) {
      const std::size_t n1 = count[count.size() - 2], n2 = count.back();
      const double merged = (level[level.size() - 2] * n1 + level.back() * n2) / static_cast<double>(n1 + n2);
      level.pop_back();
      count.pop_back();
      level.back() = merged;
      count.back() = n1 + n2;
    }
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < level.size(); ++i) out.insert(out.end(), count[i], level[i]);
  return out;
}

struct TheoremConfig {
  std::size_t n = 8;
  std::size_t r = 3;
  std::size_t d = 2;
  std::vector<std::size_t> filter_counts{8, 16, 32, 64, 128};
  double v = 1.0;
  double gamma = 1.0;
  double eps_dev = 0.0;  // 0: calibrate as a quantile of the deviation at the smallest N
  double eps_quantile = 0.2;
  std::size_t calibration_trials = 400;
  std::size_t trials = 1000;
  std::size_t expectation_samples = 100000;
  double bn_eps = 1e-5;
  double lipschitz_L = 1.0;
  bool orthogonalize = true;
  bool same_input = false;  // h' = h
  std::vector<double> eps_multipliers{0.5, 0.75, 1.0, 1.5, 2.0};
  std::vector<double> gamma_grid{0.5, 1.0, 2.0, 4.0};
  std::uint64_t seed = 0;

  void validate() const {
    if (r >= n) throw ConfigError("theorem config needs r < n");
    if (d == 0 || filter_counts.size() < 3) throw ConfigError("theorem config needs d > 0 and at least three N values");
    if (!std::is_sorted(filter_counts.begin(), filter_counts.end()) || filter_counts.front() == 0) {
      throw ConfigError("filter counts must be positive and ascending");
    }
    if (trials == 0 || expectation_samples < 2) throw ConfigError("theorem config needs trials and expectation samples");
    if (!(v > 0.0) || !(bn_eps > 0.0) || eps_dev < 0.0) throw ConfigError("theorem config has a non-positive scale");
  }
};

struct ConcentrationRow {
  std::size_t filters = 0;
  double p_hat = 0.0;
  double delta = 0.0;
  double isotonic = 0.0;
  bool held_out = false;
};

struct GammaPoint {
  double gamma = 0.0;
  double p_hat = 0.0;      // at the smallest N and the base eps
  double mean_dev = 0.0;   // mean |avg - E| at the smallest N
};

struct ConcentrationReport {
  std::vector<ConcentrationRow> rows;
  double eps = 0.0;
  double expectation = 0.0;
  double expectation_stderr = 0.0;
  double v_h = 0.0, v_h2 = 0.0;
  double slope = 0.0;      // d log p_hat / d N
  double intercept = 0.0;
  double r_squared = 0.0;
  double fitted_c = 0.0;
  double fitted_D = 0.0;
  double R = 0.0;
  double K = 0.0;
  double isotonic_residual = 0.0;  // max |p_hat - isotonic fit|
  bool bound_dominates = false;    // delta(N) >= p_hat(N) on every held-out N
  std::vector<GammaPoint> gamma_curve;
};

namespace detail {

struct ConcentrationSetup {
  Tensor4 h, h2;
  double bn_scale_h = 1.0, bn_scale_h2 = 1.0;  // gamma / sqrt(v + eps)
};

/// sum_ij tanh(<F, x_ij>) tanh(<F, y_ij>) before BN scaling.
inline double raw_product(const ConcentrationSetup& s, const Filter& f) {
  const auto a = cyclic_conv(s.h, f);
  const auto b = cyclic_conv(s.h2, f);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::tanh(a[i]) * std::tanh(b[i]);
  return acc;
}

inline Filter draw_filter(const TheoremConfig& cfg, Rng& rng) {
  Filter f = gaussian_filter(cfg.d, cfg.r, cfg.v, rng);
  return cfg.orthogonalize ? orthogonalize_filter(f, cfg.v) : f;
}

inline Tensor4 centred_image(const TheoremConfig& cfg, Rng& rng) {
  Tensor4 h(Shape4{1, cfg.d, cfg.n, cfg.n});
  for (double& x : h.data()) x = rng.normal();
  for (std::size_t c = 0; c < cfg.d; ++c) {
    auto p = h.plane(0, c);
    const double m = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
    for (double& x : p) x -= m;
  }
  return h;
}

/// Deviations |mean of the first N products - E| for every N, one row per trial.
inline std::vector<std::vector<double>> deviations(const TheoremConfig& cfg, const ConcentrationSetup& s,
                                                   double expectation, std::size_t trials, std::uint64_t stream,
                                                   std::span<const std::size_t> counts) {
  const double scale = s.bn_scale_h * s.bn_scale_h2;
  std::vector<std::vector<double>> dev(trials, std::vector<double>(counts.size()));
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(stream, t));
    double sum = 0.0;
    std::size_t drawn = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      for (; drawn < counts[k]; ++drawn) sum += scale * raw_product(s, draw_filter(cfg, rng));
      dev[t][k] = std::abs(sum / static_cast<double>(counts[k]) - expectation);
    }
  }
  return dev;
}

inline double fraction_at_least(const std::vector<std::vector<double>>& dev, std::size_t col, double eps) {
  std::size_t hits = 0;
  for (const auto& row : dev) hits += row[col] >= eps ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(dev.size());
}

}  // namespace detail

/// delta(N) = 2 n^2 exp(-min(K^2, K) c N) with K = eps / (D gamma^2 v^2 L^2 R^2 n^2).
inline double theorem_delta(double eps, double c, double D, double gamma, double v, double L, double R,
                            std::size_t n, std::size_t N) {
  const double nn = static_cast<double>(n * n);
  const double K = eps / (D * gamma * gamma * v * v * L * L * R * R * nn);
  return 2.0 * nn * std::exp(-std::min(K * K, K) * c * static_cast<double>(N));
}

/// Monte Carlo check of the concentration bound for post-BN patch inner products.
inline ConcentrationReport deviation_experiment(const TheoremConfig& cfg) {
  cfg.validate();
  Rng input_rng(derive_seed(cfg.seed, 1));
  detail::ConcentrationSetup s;
  s.h = detail::centred_image(cfg, input_rng);
  s.h2 = cfg.same_input ? s.h : detail::centred_image(cfg, input_rng);

  // Expectation pool: BN variances and the reference mean come from fresh filters.
  ConcentrationReport rep;
  std::vector<double> raw(cfg.expectation_samples);
  {
    Rng rng(derive_seed(cfg.seed, 2));
    double s1 = 0.0, s2 = 0.0, t1 = 0.0, t2 = 0.0;
    const double count = static_cast<double>(cfg.expectation_samples * cfg.n * cfg.n);
    for (std::size_t k = 0; k < cfg.expectation_samples; ++k) {
      const Filter f = detail::draw_filter(cfg, rng);
      const auto a = cyclic_conv(s.h, f);
      const auto b = cyclic_conv(s.h2, f);
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double ta = std::tanh(a[i]), tb = std::tanh(b[i]);
        s1 += ta;
        s2 += ta * ta;
        t1 += tb;
        t2 += tb * tb;
        acc += ta * tb;
      }
      raw[k] = acc;
    }
    rep.v_h = s2 / count - (s1 / count) * (s1 / count);
    rep.v_h2 = t2 / count - (t1 / count) * (t1 / count);
  }
  s.bn_scale_h = cfg.gamma / std::sqrt(rep.v_h + cfg.bn_eps);
  s.bn_scale_h2 = cfg.gamma / std::sqrt(rep.v_h2 + cfg.bn_eps);
  const double scale = s.bn_scale_h * s.bn_scale_h2;
  {
    double m = 0.0, sq = 0.0;
    for (double x : raw) m += scale * x;
    m /= static_cast<double>(raw.size());
    for (double x : raw) sq += (scale * x - m) * (scale * x - m);
    rep.expectation = m;
    rep.expectation_stderr = std::sqrt(sq / static_cast<double>(raw.size() - 1) / static_cast<double>(raw.size()));
  }

  const std::size_t n0 = cfg.filter_counts.front();
  rep.eps = cfg.eps_dev;
  if (rep.eps == 0.0) {
    const std::vector<std::size_t> first{n0};
    auto cal = detail::deviations(cfg, s, rep.expectation, cfg.calibration_trials, derive_seed(cfg.seed, 3), first);
    std::vector<double> d0;
    for (const auto& row : cal) d0.push_back(row[0]);
    std::sort(d0.begin(), d0.end());
    rep.eps = d0[static_cast<std::size_t>(cfg.eps_quantile * static_cast<double>(d0.size() - 1))];
  }
  if (rep.expectation_stderr > rep.eps / 10.0) {
    throw ConfigError("expectation standard error " + std::to_string(rep.expectation_stderr) +
                      " exceeds eps/10; raise expectation_samples");
  }

  const auto dev = detail::deviations(cfg, s, rep.expectation, cfg.trials, derive_seed(cfg.seed, 4), cfg.filter_counts);
  std::vector<double> p_hat;
  for (std::size_t k = 0; k < cfg.filter_counts.size(); ++k) p_hat.push_back(detail::fraction_at_least(dev, k, rep.eps));

  // Log-linear fit of p_hat against N (zero frequencies are skipped).
  {
    std::vector<double> xs, ys;
    for (std::size_t k = 0; k < p_hat.size(); ++k)
      if (p_hat[k] > 0.0) {
        xs.push_back(static_cast<double>(cfg.filter_counts[k]));
        ys.push_back(std::log(p_hat[k]));
      }
    if (xs.size() >= 2) {
      const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
      const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
      }
      rep.slope = sxy / sxx;
      rep.intercept = my - rep.slope * mx;
      rep.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    }
  }

  rep.R = compute_R(s.h, s.h2, rep.v_h, rep.v_h2, cfg.bn_eps, cfg.r);

  // Fit (c, D) on the two smallest N over the eps grid: for each D the best c is a
  // closed-form least-squares slope; D is scanned on a log grid.
  const double nn = static_cast<double>(cfg.n * cfg.n);
  const double A = cfg.gamma * cfg.gamma * cfg.v * cfg.v * cfg.lipschitz_L * cfg.lipschitz_L * rep.R * rep.R * nn;
  struct Obs {
    double eps, N, y;
  };
  std::vector<Obs> obs;
  for (double mult : cfg.eps_multipliers)
    for (std::size_t k = 0; k < 2; ++k) {
      const double ph = detail::fraction_at_least(dev, k, mult * rep.eps);
      if (ph > 0.0) obs.push_back({mult * rep.eps, static_cast<double>(cfg.filter_counts[k]), std::log(ph / (2.0 * nn))});
    }
  double best_err = std::numeric_limits<double>::infinity();
  for (int step = -400; step <= 400; ++step) {
    const double D = std::pow(10.0, step / 40.0);
    double suu = 0.0, suy = 0.0;
    for (const auto& o : obs) {
      const double K = o.eps / (D * A);
      const double u = std::min(K * K, K) * o.N;
      suu += u * u;
      suy += u * o.y;
    }
    if (suu == 0.0) continue;
    const double c = std::max(0.0, -suy / suu);
    double err = 0.0;
    for (const auto& o : obs) {
      const double K = o.eps / (D * A);
      const double r = o.y + std::min(K * K, K) * c * o.N;
      err += r * r;
    }
    if (err < best_err) {
      best_err = err;
      rep.fitted_c = c;
      rep.fitted_D = D;
    }
  }
  rep.K = rep.eps / (rep.fitted_D * A);

  const auto iso = isotonic_nonincreasing(p_hat);
  rep.bound_dominates = true;
  for (std::size_t k = 0; k < cfg.filter_counts.size(); ++k) {
    ConcentrationRow row;
    row.filters = cfg.filter_counts[k];
    row.p_hat = p_hat[k];
    row.delta = theorem_delta(rep.eps, rep.fitted_c, rep.fitted_D, cfg.gamma, cfg.v, cfg.lipschitz_L, rep.R, cfg.n,
                              row.filters);
    row.isotonic = iso[k];
    row.held_out = k >= 2;
    rep.isotonic_residual = std::max(rep.isotonic_residual, std::abs(p_hat[k] - iso[k]));
    if (row.held_out && row.delta < row.p_hat) rep.bound_dominates = false;
    rep.rows.push_back(row);
  }

  // With the fixed BN scale the products scale as gamma^2, so the deviation curve
  // follows from the gamma = cfg.gamma draws.
  for (double g : cfg.gamma_grid) {
    const double f = (g * g) / (cfg.gamma * cfg.gamma);
    GammaPoint gp{g, 0.0, 0.0};
    for (const auto& row : dev) {
      const double d = row[0] * f;
      gp.p_hat += d >= rep.eps ? 1.0 : 0.0;
      gp.mean_dev += d;
    }
    gp.p_hat /= static_cast<double>(dev.size());
    gp.mean_dev /= static_cast<double>(dev.size());
    rep.gamma_curve.push_back(gp);
  }
  return rep;
}

struct PatchBoundReport {
  double patch_norm = 0.0;
  double gaussian_norm = 0.0;    // psi_2 norm of <F, x>
  double orthogonal_norm = 0.0;  // psi_2 norm of <Q, x>
  double c0 = 0.0;               // gaussian_norm / (v |x|)
  double c1 = 0.0;               // orthogonal_norm / (v |x|)
};

/// Empirical psi_2 constants of the patch inner product for Gaussian and
/// orthogonalized filters on a fixed patch.
inline PatchBoundReport verify_subgaussian_patch_bound(const Filter& patch, double v, std::size_t samples, Rng& rng) {
  PatchBoundReport rep;
  double nsq = 0.0;
  for (double x : patch.w) nsq += x * x;
  rep.patch_norm = std::sqrt(nsq);
  std::vector<double> g(samples), q(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const Filter f = gaussian_filter(patch.channels, patch.size, v, rng);
    const Filter o = orthogonalize_filter(f, v);
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < f.w.size(); ++i) {
      a += f.w[i] * patch.w[i];
      b += o.w[i] * patch.w[i];
    }
    g[s] = a;
    q[s] = b;
  }
  rep.gaussian_norm = estimate_orlicz(g, 2).norm;
  rep.orthogonal_norm = estimate_orlicz(q, 2).norm;
  if (rep.patch_norm > 0.0) {
    rep.c0 = rep.gaussian_norm / (v * rep.patch_norm);
    rep.c1 = rep.orthogonal_norm / (v * rep.patch_norm);
  }
  return rep;
}

}  // namespace isonas
