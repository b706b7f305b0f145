#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spcontrol/grid.hpp"

namespace spc {

/// Spatial weight profile psi(x) = x^a (1-x)^b, normalized so max psi = 1.
///
/// The profile vanishes on the boundary, is positive inside, and its only
/// interior critical point is the maximizer x* = a/(a+b), which must lie in
/// G1 so that |psi'| > 0 on interior nodes outside G1. (The derivative of
/// this polynomial family also vanishes at the endpoints for a,b >= 2; the
/// gradient condition is therefore checked on interior nodes only.)
struct PsiFunction {
  double a = 3.0, b = 5.0;
  double norm = 1.0;  // 1 / max of x^a (1-x)^b
  double argmax = 0.0;

  double value(double x) const;
  double derivative(double x) const;
};

/// Build psi with integer exponents a,b >= 2; validates argmax in G1,
/// psi > 0 on interior nodes and |psi'| > 0 on interior nodes outside G1.
/// Throws ArgmaxOutsideG1 when the maximizer misses G1.
PsiFunction build_psi(const SpatialGrid& grid, double a, double b);

/// Carleman weight family on (0,T) x [0,1]:
///   alpha = (e^{mu psi} - e^{2 mu}) / (t (T-t)),       alpha < 0
///   phi   = e^{mu psi} / (t (T-t)),                    phi > 0
///   theta = e^{lambda alpha}  (kept in log space as lambda*alpha)
/// plus the regularized variants with (t+eps)(T-t+eps) in the denominator.
struct WeightFamily {
  PsiFunction psi;
  double mu = 1.0;
  double T = 1.0;

  /// Pointwise evaluation at interior time t in (0,T).
  struct Point {
    double alpha;   // negative
    double phi;     // positive
    double log_phi;
  };
  Point eval(double t, double x) const;  // throws TimeOnBoundary at t in {0,T}

  /// Regularized evaluation, valid for all t in [0,T].
  Point eval_reg(double t, double x, double eps) const;

  /// Exact t-derivatives of alpha and phi at fixed x.
  double alpha_t(double t, double x) const;
  double alpha_tt(double t, double x) const;
  double phi_t(double t, double x) const;
  double phi_tt(double t, double x) const;
};

WeightFamily make_weights(const PsiFunction& psi, double mu, double T);

/// Smallest constants realizing the structural bounds of the weight family
/// over a sample grid (n_t interior times x all grid nodes):
///   phi >= c_phi / T^2                 (c_phi = min phi T^2)
///   |phi_t|  <= c_phi_t  T   phi^2
///   |phi_tt| <= c_phi_tt T^2 phi^3
///   |alpha_t|  <= c_alpha_t  T   e^{2mu} phi^2
///   |alpha_tt| <= c_alpha_tt T^2 e^{2mu} phi^3
struct WeightBounds {
  double c_phi_lower = 0.0;
  double c_phi_t = 0.0;
  double c_phi_tt = 0.0;
  double c_alpha_t = 0.0;
  double c_alpha_tt = 0.0;
};
WeightBounds fit_weight_bounds(const WeightFamily& wf, const SpatialGrid& grid,
                               std::size_t n_t);

/// Sup-norms of the coefficient set entering the threshold and cost
/// exponents. Filled by the spde module from the actual evaluation grid.
struct CoefficientNorms {
  double a1 = 0.0;
  double a2 = 0.0;
  double beta = 0.0;
  double B1 = 0.0;  // drift of the forward pair
  double B2 = 0.0;  // noise drift of the forward pair
  double B = 0.0;   // drift of the backward pair
};

/// Threshold lambda above which the backward-equation estimate holds:
///   C_cal [ T + T^2 (1 + |a1|^{2/3} + |a2|^{2/3} + |beta|^2 + |B1|^2 + |B2|^2) ].
struct LambdaThreshold {
  double value = 0.0;
  double r1 = 0.0;  // 1 + 1/T + coefficient aggregate of the Gronwall rate
  double r2 = 0.0;  // coefficient aggregate of the zero-order rate
};
LambdaThreshold lambda_threshold_backward(const CoefficientNorms& c, double T,
                                          double C_cal);
/// Forward-equation variant: the noise coefficient enters quadratically.
LambdaThreshold lambda_threshold_forward(const CoefficientNorms& c, double T,
                                         double C_cal);

/// Exponent K of the cost bound e^{C K} |y_0|^2 for the forward control
/// problem.
double cost_exponent_forward(const CoefficientNorms& c, double T);
/// Exponent M of the cost bound e^{C M} E|y_T|^2 for the backward problem.
double cost_exponent_backward(const CoefficientNorms& c, double T);

}  // namespace spc
