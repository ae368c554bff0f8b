#pragma once

// Perturbation lifecycle: scaled-uniform initialization, normalized
// gradient ascent and Frobenius-ball projection, all per sample.

#include <cstdint>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab {

/// Geometry of a perturbation: which (sample, position) slots may carry a
/// nonzero value. PAD positions never do.
struct DeltaGeometry {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t dim = 0;
  std::vector<std::uint8_t> mask;  // batch * seq_len, 1 = perturbable

  /// Perturbed element count for sample b: non-PAD tokens x dim.
  std::size_t n_delta(std::size_t b) const;
};

/// Additive embedding perturbation under a per-sample Frobenius budget.
/// At rest (after any projection) every per-sample norm is <= eps.
struct Perturbation {
  Tensor values;            // (batch, seq, dim), zero at PAD
  std::vector<double> eps;  // per-sample budget
  DeltaGeometry geometry;

  double sample_norm(std::size_t b) const;
  Perturbation clone() const;
};

/// delta0 with each perturbable element i.i.d. uniform on
/// [-eps/sqrt(N_delta), +eps/sqrt(N_delta)]; always strictly inside the
/// ball. eps = 0 consumes no randomness and yields exact zeros.
Perturbation init_delta(const DeltaGeometry& geom, const std::vector<double>& eps, RngState& rng);
Perturbation init_delta(const DeltaGeometry& geom, double eps, RngState& rng);

/// In-place per-sample projection onto the eps-ball: inside is returned
/// bit-for-bit untouched, outside is rescaled by eps/norm.
void project_frobenius(Perturbation& delta);
/// Single-tensor variant used by tests and toys.
void project_frobenius(Tensor& delta_b, double eps);

/// One normalized ascent step followed by projection:
///   delta_b <- project(delta_b + step * g_b / ||g_b||_F, eps_b).
/// Samples whose gradient norm is below 1e-12 are left unchanged.
void ascent_step(Perturbation& delta, const Tensor& g_adv, double step);

}  // namespace advlab
