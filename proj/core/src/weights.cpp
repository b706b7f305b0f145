#include "spcontrol/weights.hpp"

#include <algorithm>
#include <cmath>

namespace spc {

double PsiFunction::value(double x) const {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  return norm * std::pow(x, a) * std::pow(1.0 - x, b);
}

double PsiFunction::derivative(double x) const {
  if (x <= 0.0 || x >= 1.0) {
    // Limit of the closed form; nonzero only when an exponent equals 1.
    if (x <= 0.0) return a == 1.0 ? norm : 0.0;
    return b == 1.0 ? -norm : 0.0;
  }
  return norm * std::pow(x, a - 1.0) * std::pow(1.0 - x, b - 1.0) *
         (a * (1.0 - x) - b * x);
}

PsiFunction build_psi(const SpatialGrid& grid, double a, double b) {
  if (!(a >= 2.0 && b >= 2.0)) throw ConfigInvalid("psi exponents must be >= 2");
  PsiFunction psi;
  psi.a = a;
  psi.b = b;
  psi.argmax = a / (a + b);
  const double peak = std::pow(psi.argmax, a) * std::pow(1.0 - psi.argmax, b);
  psi.norm = 1.0 / peak;
  if (!(psi.argmax > grid.g1.lo && psi.argmax < grid.g1.hi))
    throw ArgmaxOutsideG1("interior maximum of psi must lie in G1");
  for (std::size_t i = 1; i + 1 < grid.M; ++i) {
    const double x = grid.node(i);
    if (!(psi.value(x) > 0.0)) throw ArgmaxOutsideG1("psi must be positive inside (0,1)");
    if (!grid.g1_range.contains(i) && psi.derivative(x) == 0.0)
      throw ArgmaxOutsideG1("psi derivative vanishes outside G1");
  }
  return psi;
}

namespace {
// g(t) = 1/(t(T-t)) and derivatives.
inline double gfun(double t, double T) { return 1.0 / (t * (T - t)); }
inline double gfun_t(double t, double T) {
  const double g = gfun(t, T);
  return -(T - 2.0 * t) * g * g;
}
inline double gfun_tt(double t, double T) {
  const double g = gfun(t, T);
  const double d = T - 2.0 * t;
  return 2.0 * g * g + 2.0 * d * d * g * g * g;
}
}  // namespace

WeightFamily::Point WeightFamily::eval(double t, double x) const {
  if (!(t > 0.0 && t < T))
    throw TimeOnBoundary("unregularized weights need t strictly inside (0,T)");
  const double p = psi.value(x);
  const double g = gfun(t, T);
  Point out;
  out.alpha = (std::exp(mu * p) - std::exp(2.0 * mu)) * g;
  out.phi = std::exp(mu * p) * g;
  out.log_phi = mu * p + std::log(g);
  return out;
}

WeightFamily::Point WeightFamily::eval_reg(double t, double x, double eps) const {
  const double p = psi.value(x);
  const double g = 1.0 / ((t + eps) * (T - t + eps));
  Point out;
  out.alpha = (std::exp(mu * p) - std::exp(2.0 * mu)) * g;
  out.phi = std::exp(mu * p) * g;
  out.log_phi = mu * p + std::log(g);
  return out;
}

double WeightFamily::alpha_t(double t, double x) const {
  return (std::exp(mu * psi.value(x)) - std::exp(2.0 * mu)) * gfun_t(t, T);
}
double WeightFamily::alpha_tt(double t, double x) const {
  return (std::exp(mu * psi.value(x)) - std::exp(2.0 * mu)) * gfun_tt(t, T);
}
double WeightFamily::phi_t(double t, double x) const {
  return std::exp(mu * psi.value(x)) * gfun_t(t, T);
}
double WeightFamily::phi_tt(double t, double x) const {
  return std::exp(mu * psi.value(x)) * gfun_tt(t, T);
}

WeightFamily make_weights(const PsiFunction& psi, double mu, double T) {
  if (!(mu >= 1.0)) throw ConfigInvalid("weights.mu must be >= 1");
  if (!(T > 0.0)) throw ConfigInvalid("horizon T must be positive");
  return WeightFamily{psi, mu, T};
}

WeightBounds fit_weight_bounds(const WeightFamily& wf, const SpatialGrid& grid,
                               std::size_t n_t) {
  WeightBounds b;
  b.c_phi_lower = 1e300;
  const double T = wf.T;
  const double e2mu = std::exp(2.0 * wf.mu);
  for (std::size_t j = 1; j <= n_t; ++j) {
    const double t = T * static_cast<double>(j) / static_cast<double>(n_t + 1);
    for (std::size_t i = 0; i < grid.M; ++i) {
      const double x = grid.node(i);
      const auto p = wf.eval(t, x);
      const double phi2 = p.phi * p.phi;
      const double phi3 = phi2 * p.phi;
      b.c_phi_lower = std::min(b.c_phi_lower, p.phi * T * T);
      b.c_phi_t = std::max(b.c_phi_t, std::abs(wf.phi_t(t, x)) / (T * phi2));
      b.c_phi_tt = std::max(b.c_phi_tt, std::abs(wf.phi_tt(t, x)) / (T * T * phi3));
      b.c_alpha_t = std::max(b.c_alpha_t, std::abs(wf.alpha_t(t, x)) / (T * e2mu * phi2));
      b.c_alpha_tt =
          std::max(b.c_alpha_tt, std::abs(wf.alpha_tt(t, x)) / (T * T * e2mu * phi3));
    }
  }
  return b;
}

namespace {
inline double p23(double v) { return std::cbrt(v * v); }  // |v|^{2/3}
}

LambdaThreshold lambda_threshold_backward(const CoefficientNorms& c, double T,
                                          double C_cal) {
  LambdaThreshold out;
  const double agg = 1.0 + p23(c.a1) + p23(c.a2) + c.beta * c.beta + c.B1 * c.B1 +
                     c.B2 * c.B2;
  out.value = C_cal * (T + T * T * agg);
  out.r1 = 1.0 + 1.0 / T + p23(c.a1) + p23(c.a2) + c.beta * c.beta + c.B1 * c.B1 +
           c.B2 * c.B2;
  out.r2 = 1.0 + c.a1 + c.a2 * c.a2 + c.beta * c.beta + c.B1 * c.B1;
  return out;
}

LambdaThreshold lambda_threshold_forward(const CoefficientNorms& c, double T,
                                         double C_cal) {
  LambdaThreshold out;
  const double agg =
      1.0 + p23(c.a1) + c.a2 * c.a2 + c.beta * c.beta + c.B * c.B;
  out.value = C_cal * (T + T * T * agg);
  out.r1 = 1.0 + 1.0 / T + p23(c.a1) + c.a2 * c.a2 + c.beta * c.beta + c.B * c.B;
  out.r2 = 1.0 + c.beta * c.beta + c.a1 + c.B * c.B + c.a2 * c.a2;
  return out;
}

double cost_exponent_forward(const CoefficientNorms& c, double T) {
  return 1.0 + 1.0 / T + p23(c.a1) + p23(c.a2) + c.beta * c.beta + c.B1 * c.B1 +
         c.B2 * c.B2 +
         T * (1.0 + c.a1 + c.a2 * c.a2 + c.beta * c.beta + c.B1 * c.B1);
}

double cost_exponent_backward(const CoefficientNorms& c, double T) {
  return 1.0 + 1.0 / T + p23(c.a1) + c.a2 * c.a2 + c.beta * c.beta + c.B * c.B +
         T * (1.0 + c.a1 + c.a2 * c.a2 + c.beta * c.beta + c.B * c.B);
}

}  // namespace spc
