#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spcontrol/errors.hpp"
#include "spcontrol/linalg.hpp"

namespace spc {

/// Closed index range [lo, hi] of grid nodes.
struct IndexRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
  bool contains(std::size_t i) const { return i >= lo && i <= hi; }
  std::size_t count() const { return hi - lo + 1; }
};

/// Open real interval (lo, hi).
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Uniform grid on [0,1] with two nested observation regions
/// G1 strictly inside G0 strictly inside (0,1).
///
/// Nodes are x_i = i*h with h = 1/(M-1). Quadrature is the trapezoid rule,
/// the boundary measure is the counting measure on {0,1}, and the outward
/// normal is -1 at x=0 and +1 at x=1.
struct SpatialGrid {
  std::size_t M = 0;
  double h = 0.0;
  std::vector<double> nodes;    // size M
  std::vector<double> quad_w;   // trapezoid weights, size M, sums to 1
  Interval g0, g1;              // the real intervals as given
  IndexRange g0_range, g1_range;  // nodes strictly inside each interval

  double node(std::size_t i) const { return nodes[i]; }
  bool in_g0(std::size_t i) const { return g0_range.contains(i); }

  /// Trapezoid integral of a nodal field.
  double integrate(std::span<const double> f) const {
    return dot(quad_w, f);
  }
  /// Weighted L2 inner product  sum_i w_i a_i b_i.
  double inner(std::span<const double> a, std::span<const double> b) const {
    return dot_weighted(quad_w, a, b);
  }
  /// Weighted L2 inner product restricted to G0.
  double inner_g0(std::span<const double> a, std::span<const double> b) const {
    double s = 0.0;
    for (std::size_t i = g0_range.lo; i <= g0_range.hi; ++i)
      s += quad_w[i] * a[i] * b[i];
    return s;
  }
};

/// Build the grid; validates M >= 4 and the strict nesting
/// G1 inside G0 inside (0,1).
///
/// Throws NestedRegionViolation if the real intervals are not strictly
/// nested, TooCoarse if a region contains no strictly interior node.
SpatialGrid build_grid(std::size_t M, Interval g0, Interval g1);

/// Time-frozen spatial operators of the Robin problem.
///
/// stiffness realizes the bilinear form
///   (y,z) -> int_G a grad y . grad z dx + sum_{x in {0,1}} beta(x) y(x) z(x)
/// with the diffusion coefficient evaluated at element midpoints, so the
/// matrix is symmetric by construction. mass is the lumped (diagonal)
/// trapezoid mass matrix, stored as the quadrature weight vector.
struct RobinAssembly {
  std::vector<double> mass;   // diagonal of the mass matrix (= quad weights)
  TridiagSym stiffness;
  double beta0 = 0.0, beta1 = 0.0;  // Robin coefficients used at x=0, x=1
};

/// Assemble mass and stiffness for diffusion samples a_mid (per element,
/// size M-1, values at element midpoints) and Robin coefficients beta at the
/// two endpoints. Throws EllipticityViolation if min(a_mid) <= 0.
RobinAssembly assemble_operators(const SpatialGrid& grid,
                                 std::span<const double> a_mid,
                                 double beta0, double beta1);

/// Nodal gradient: centered differences in the interior, one-sided at the
/// two boundary nodes. Exact for affine fields.
void apply_gradient(const SpatialGrid& grid, std::span<const double> z,
                    std::span<double> out);

/// Transpose of apply_gradient: out_j = sum_i G_ij v_i.
void apply_gradient_transpose(const SpatialGrid& grid, std::span<const double> v,
                              std::span<double> out);

/// Discrete weak divergence pairing
///   <div F, z>  =  -int_G F grad z dx + sum_{x in {0,1}} F(x) nu(x) z(x)
/// with the trapezoid rule for the interior integral.
double weak_divergence_pairing(const SpatialGrid& grid, std::span<const double> F,
                               std::span<const double> z);

/// Boundary-to-interior trace ratio
///   (z(0)^2 + z(1)^2) / ( sqrt(int (z^2 + |grad z|^2)) * sqrt(int z^2) ).
/// Throws ZeroField when int z^2 vanishes.
double trace_inequality_gap(const SpatialGrid& grid, std::span<const double> z);

}  // namespace spc
