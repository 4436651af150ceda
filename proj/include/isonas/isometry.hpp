#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "isonas/blocks.hpp"
#include "isonas/jacobian.hpp"
#include "isonas/meanfield.hpp"
#include "isonas/random.hpp"

namespace isonas {

struct BlockIsometryConfig {
  std::size_t width = 16;              // block channels
  std::size_t spatial = 8;             // input side
  std::size_t calibration_batch = 64;  // batch that sets the indicator's running statistics
  std::size_t probes = 24;             // Hutchinson probes when the Jacobian is too large to form
  double v_star = 0.025;
  double gaussian_weight_variance = 2.0;
  Padding padding = Padding::circular;
  double tol_phi = 0.05;
  double tol_var = 0.05;
  std::uint64_t seed = 0;

  friend bool operator==(const BlockIsometryConfig&, const BlockIsometryConfig&) = default;
};

struct BlockIsometryResult {
  std::string module;
  InitScheme scheme = InitScheme::orthogonal_triangular;
  SpectralStats stats;
  IsometryVerdict verdict;
  bool estimated = false;  // Hutchinson moments instead of the dense Jacobian
  double phi_stderr = 0.0;
  double phi2_stderr = 0.0;
};

/// Spectral moments of one block's input-output Jacobian (indicator BN included, in
/// eval mode) at a unit-variance Gaussian input, the fixed point the carrier is held at.
inline BlockIsometryResult analyze_block(const BlockTemplate& t, InitScheme scheme, const BlockIsometryConfig& cfg) {
  BlockInit bi;
  bi.scheme = scheme;
  bi.v_star = cfg.v_star;
  bi.gaussian_weight_variance = cfg.gaussian_weight_variance;
  bi.seed = derive_seed(cfg.seed, 1);
  Block b = build_block(t, cfg.width, bi, describe(t));

  Rng rng(derive_seed(cfg.seed, 2));
  Tensor4 batch(Shape4{cfg.calibration_batch, cfg.width, cfg.spatial, cfg.spatial});
  for (double& v : batch.data()) v = rng.normal();
  const double momentum = b.indicator.momentum;
  b.indicator.momentum = 1.0;
  {
    Tape tape;
    forward_block(tape, tape.input(batch), b, BNMode::train, cfg.padding);
  }
  b.indicator.momentum = momentum;

  const Tensor4 x = batch.slice_batch(0, 1);
  const BlockFn fn = [&](Tape& tape, Node in) { return forward_block(tape, in, b, BNMode::eval, cfg.padding); };
  BlockIsometryResult r;
  r.module = describe(t);
  r.scheme = scheme;
  const std::size_t out_side = (cfg.spatial - 1) / t.stride + 1;
  const std::size_t n_in = x.shape().size(), n_out = cfg.width * out_side * out_side;
  if (std::max(n_in, n_out) <= kMaxDenseJacobian) {
    r.stats = spectral_stats(jacobian_of(fn, x));
  } else {
    Rng probe_rng(derive_seed(cfg.seed, 3));
    const MomentEstimate m = estimate_jjt_moments(fn, x, cfg.probes, probe_rng);
    r.stats = spectral_stats(m);
    r.estimated = true;
    r.phi_stderr = m.phi_stderr;
    r.phi2_stderr = m.phi2_stderr;
  }
  r.verdict = check_isometry(r.stats, cfg.tol_phi, cfg.tol_var);
  return r;
}

/// Every candidate of `templates` under both the calibrated orthogonal and the Gaussian init.
inline std::vector<BlockIsometryResult> analyze_templates(const std::vector<BlockTemplate>& templates,
                                                          const BlockIsometryConfig& cfg) {
  std::vector<BlockIsometryResult> out;
  for (InitScheme s : {InitScheme::orthogonal_triangular, InitScheme::gaussian})
    for (const auto& t : templates) out.push_back(analyze_block(t, s, cfg));
  return out;
}

}  // namespace isonas
