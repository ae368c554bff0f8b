#include "advlab/adversary.hpp"

#include <cmath>
#include <stdexcept>

namespace advlab {

namespace {
constexpr double kDegenerateGradNorm = 1e-12;
}

std::size_t DeltaGeometry::n_delta(std::size_t b) const {
  std::size_t tokens = 0;
  for (std::size_t s = 0; s < seq_len; ++s) tokens += mask[b * seq_len + s];
  return tokens * dim;
}

double Perturbation::sample_norm(std::size_t b) const {
  const std::size_t stride = geometry.seq_len * geometry.dim;
  return frobenius_norm({values.data() + b * stride, stride});
}

Perturbation Perturbation::clone() const {
  Perturbation c;
  c.values = values.clone();
  c.eps = eps;
  c.geometry = geometry;
  return c;
}

Perturbation init_delta(const DeltaGeometry& geom, const std::vector<double>& eps, RngState& rng) {
  if (eps.size() != geom.batch) throw std::invalid_argument("init_delta: eps count mismatch");
  for (double e : eps)
    if (e < 0.0) throw std::invalid_argument("init_delta: eps must be >= 0");
  Perturbation p;
  p.geometry = geom;
  p.eps = eps;
  p.values = Tensor::zeros({geom.batch, geom.seq_len, geom.dim});
  double* v = p.values.data();
  for (std::size_t b = 0; b < geom.batch; ++b) {
    if (eps[b] == 0.0) continue;
    const std::size_t n = geom.n_delta(b);
    if (n == 0) continue;
    const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t s = 0; s < geom.seq_len; ++s) {
      if (!geom.mask[b * geom.seq_len + s]) continue;
      double* row = v + (b * geom.seq_len + s) * geom.dim;
      for (std::size_t c = 0; c < geom.dim; ++c)
        row[c] = rng.uniform(-eps[b], eps[b]) * inv_sqrt_n;
    }
  }
  return p;
}

Perturbation init_delta(const DeltaGeometry& geom, double eps, RngState& rng) {
  return init_delta(geom, std::vector<double>(geom.batch, eps), rng);
}

namespace {

// Rescales until the recomputed norm is inside the ball, so a projected
// point is a bit-for-bit fixed point of projection (a single rescale can
// land one ulp outside).
void project_span(std::span<double> v, double eps) {
  for (;;) {
    const double norm = frobenius_norm({v.data(), v.size()});
    if (norm <= eps) return;
    double factor = eps / norm;
    if (factor >= 1.0) factor = std::nextafter(1.0, 0.0);
    for (double& x : v) x *= factor;
  }
}

}  // namespace

void project_frobenius(Tensor& delta_b, double eps) {
  if (eps < 0.0) throw std::invalid_argument("project_frobenius: eps must be >= 0");
  project_span({delta_b.data(), delta_b.size()}, eps);
}

void project_frobenius(Perturbation& delta) {
  const std::size_t stride = delta.geometry.seq_len * delta.geometry.dim;
  double* v = delta.values.data();
  for (std::size_t b = 0; b < delta.geometry.batch; ++b)
    project_span({v + b * stride, stride}, delta.eps[b]);
}

void ascent_step(Perturbation& delta, const Tensor& g_adv, double step) {
  if (g_adv.shape() != delta.values.shape())
    throw std::invalid_argument("ascent_step: gradient shape " + shape_str(g_adv.shape()) +
                                " does not match delta " + shape_str(delta.values.shape()));
  if (step <= 0.0) throw std::invalid_argument("ascent_step: step must be > 0");
  const std::size_t stride = delta.geometry.seq_len * delta.geometry.dim;
  const double* g = g_adv.data();
  double* v = delta.values.data();
  for (std::size_t b = 0; b < delta.geometry.batch; ++b) {
    const double gnorm = frobenius_norm({g + b * stride, stride});
    if (gnorm < kDegenerateGradNorm) continue;  // saturated loss; skip rather than divide
    const double factor = step / gnorm;
    for (std::size_t s = 0; s < delta.geometry.seq_len; ++s) {
      if (!delta.geometry.mask[b * delta.geometry.seq_len + s]) continue;
      for (std::size_t c = 0; c < delta.geometry.dim; ++c) {
        const std::size_t i = (b * delta.geometry.seq_len + s) * delta.geometry.dim + c;
        v[i] += factor * g[i];
      }
    }
  }
  project_frobenius(delta);
}

}  // namespace advlab
