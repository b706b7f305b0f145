#include "spcontrol/grid.hpp"

#include <cmath>
#include <string>

namespace spc {

namespace {

// Nodes strictly inside (lo, hi). Exact interval endpoints that land on a
// node exclude that node; the small tolerance only guards against the
// rounding of lo/h itself.
IndexRange strict_inside(std::size_t M, double h, Interval iv, const char* name) {
  const double eps = 1e-9;
  const double lo_idx = iv.lo / h;
  const double hi_idx = iv.hi / h;
  const long lo = static_cast<long>(std::floor(lo_idx + eps)) + 1;
  const long hi = static_cast<long>(std::ceil(hi_idx - eps)) - 1;
  if (lo > hi || lo < 0 || hi >= static_cast<long>(M))
    throw TooCoarse(std::string(name) + " contains no interior grid node");
  return IndexRange{static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

SpatialGrid build_grid(std::size_t M, Interval g0, Interval g1) {
  if (M < 4) throw TooCoarse("grid needs at least 4 nodes");
  if (!(g0.lo > 0.0 && g0.hi < 1.0 && g0.lo < g0.hi))
    throw NestedRegionViolation("G0 must be strictly inside (0,1)");
  if (!(g1.lo > g0.lo && g1.hi < g0.hi && g1.lo < g1.hi))
    throw NestedRegionViolation("G1 must be strictly inside G0");

  SpatialGrid g;
  g.M = M;
  g.h = 1.0 / static_cast<double>(M - 1);
  g.nodes.resize(M);
  for (std::size_t i = 0; i < M; ++i) g.nodes[i] = static_cast<double>(i) * g.h;
  g.nodes[M - 1] = 1.0;
  g.quad_w.assign(M, g.h);
  g.quad_w[0] = g.quad_w[M - 1] = 0.5 * g.h;
  g.g0 = g0;
  g.g1 = g1;
  g.g0_range = strict_inside(M, g.h, g0, "G0");
  g.g1_range = strict_inside(M, g.h, g1, "G1");
  return g;
}

RobinAssembly assemble_operators(const SpatialGrid& grid,
                                 std::span<const double> a_mid,
                                 double beta0, double beta1) {
  const std::size_t M = grid.M;
  if (a_mid.size() != M - 1) throw LevelMismatch("need one diffusion sample per element");
  RobinAssembly A;
  A.mass = grid.quad_w;
  A.beta0 = beta0;
  A.beta1 = beta1;
  A.stiffness.diag.assign(M, 0.0);
  A.stiffness.off.assign(M - 1, 0.0);
  for (std::size_t e = 0; e + 1 < M; ++e) {
    if (!(a_mid[e] > 0.0))
      throw EllipticityViolation("diffusion coefficient not positive at element " +
                                 std::to_string(e));
    const double k = a_mid[e] / grid.h;
    A.stiffness.diag[e] += k;
    A.stiffness.diag[e + 1] += k;
    A.stiffness.off[e] -= k;
  }
  A.stiffness.diag[0] += beta0;
  A.stiffness.diag[M - 1] += beta1;
  return A;
}

void apply_gradient(const SpatialGrid& grid, std::span<const double> z,
                    std::span<double> out) {
  const std::size_t M = grid.M;
  const double h = grid.h;
  out[0] = (z[1] - z[0]) / h;
  for (std::size_t i = 1; i + 1 < M; ++i) out[i] = (z[i + 1] - z[i - 1]) / (2.0 * h);
  out[M - 1] = (z[M - 1] - z[M - 2]) / h;
}

void apply_gradient_transpose(const SpatialGrid& grid, std::span<const double> v,
                              std::span<double> out) {
  const std::size_t M = grid.M;
  const double h = grid.h;
  for (std::size_t j = 0; j < M; ++j) out[j] = 0.0;
  // Row 0: entries -1/h at col 0, +1/h at col 1.
  out[0] += -v[0] / h;
  out[1] += v[0] / h;
  // Rows 1..M-2: -1/(2h) at col i-1, +1/(2h) at col i+1.
  for (std::size_t i = 1; i + 1 < M; ++i) {
    out[i - 1] += -v[i] / (2.0 * h);
    out[i + 1] += v[i] / (2.0 * h);
  }
  // Row M-1: -1/h at col M-2, +1/h at col M-1.
  out[M - 2] += -v[M - 1] / h;
  out[M - 1] += v[M - 1] / h;
}

double weak_divergence_pairing(const SpatialGrid& grid, std::span<const double> F,
                               std::span<const double> z) {
  std::vector<double> gz(grid.M);
  apply_gradient(grid, z, gz);
  double s = -dot_weighted(grid.quad_w, F, gz);
  // Outward normal: -1 at x=0, +1 at x=1; boundary measure is counting.
  s += F[grid.M - 1] * z[grid.M - 1] - F[0] * z[0];
  return s;
}

double trace_inequality_gap(const SpatialGrid& grid, std::span<const double> z) {
  const double l2 = grid.inner(z, z);
  if (l2 == 0.0) throw ZeroField("trace gap of the zero field");
  std::vector<double> gz(grid.M);
  apply_gradient(grid, z, gz);
  const double h1 = l2 + grid.inner(gz, gz);
  const double num = z[0] * z[0] + z[grid.M - 1] * z[grid.M - 1];
  return num / (std::sqrt(h1) * std::sqrt(l2));
}

}  // namespace spc
