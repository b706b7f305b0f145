#include <doctest.h>

#include <cmath>
#include <vector>

#include "spcontrol/errors.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/weights.hpp"

using namespace spc;

namespace {

SpatialGrid default_grid() { return build_grid(101, {0.25, 0.5}, {0.3, 0.45}); }

}  // namespace

TEST_CASE("psi has the closed-form argmax inside G1 and vanishes at the ends") {
  const auto g = default_grid();
  const auto psi = build_psi(g, 3.0, 5.0);
  CHECK(psi.argmax == doctest::Approx(3.0 / 8.0).epsilon(1e-12));
  CHECK(psi.argmax > g.g1.lo);
  CHECK(psi.argmax < g.g1.hi);
  CHECK(psi.value(0.0) == 0.0);
  CHECK(psi.value(1.0) == 0.0);
  CHECK(psi.value(psi.argmax) == doctest::Approx(1.0).epsilon(1e-13));
  for (std::size_t i = 1; i + 1 < g.M; ++i) CHECK(psi.value(g.node(i)) > 0.0);
}

TEST_CASE("psi validation") {
  const auto g = default_grid();
  // argmax a/(a+b) = 1/2 lies outside G1 = (0.3, 0.45)
  CHECK_THROWS_AS(build_psi(g, 2.0, 2.0), ArgmaxOutsideG1);
  CHECK_THROWS_AS(build_psi(g, 1.0, 5.0), ConfigInvalid);
}

TEST_CASE("weight family matches hand substitution") {
  const auto g = default_grid();
  const auto wf = make_weights(build_psi(g, 3.0, 5.0), 1.0, 2.0);
  const double e = std::exp(1.0), e2 = std::exp(2.0);

  // Boundary point: psi = 0, t(T-t) = 1.
  const auto pb = wf.eval(1.0, 0.0);
  CHECK(pb.alpha == doctest::Approx(1.0 - e2).epsilon(1e-13));
  CHECK(pb.phi == doctest::Approx(1.0).epsilon(1e-13));

  // At the argmax: psi = 1.
  const auto pm = wf.eval(1.0, wf.psi.argmax);
  CHECK(pm.alpha == doctest::Approx(e - e2).epsilon(1e-13));
  CHECK(pm.phi == doctest::Approx(e).epsilon(1e-13));

  CHECK_THROWS_AS(wf.eval(0.0, 0.5), TimeOnBoundary);
  CHECK_THROWS_AS(wf.eval(2.0, 0.5), TimeOnBoundary);
}

TEST_CASE("theta underflows gracefully near the time boundary") {
  const auto g = default_grid();
  const auto wf = make_weights(build_psi(g, 3.0, 5.0), 1.0, 1.0);
  const auto p = wf.eval(1e-6, 0.5);
  const double theta = std::exp(10.0 * p.alpha);
  CHECK(theta == 0.0);
  CHECK(std::isfinite(p.alpha));
}

TEST_CASE("weight bounds are finite and the phi_t identity is exact") {
  const auto g = default_grid();
  for (double T : {0.5, 1.0, 2.0}) {
    const auto wf = make_weights(build_psi(g, 3.0, 5.0), 1.0, T);
    const auto b = fit_weight_bounds(wf, g, 64);
    CHECK(b.c_phi_lower > 0.0);
    CHECK(std::isfinite(b.c_phi_t));
    CHECK(std::isfinite(b.c_phi_tt));
    CHECK(std::isfinite(b.c_alpha_t));
    CHECK(std::isfinite(b.c_alpha_tt));
    // phi >= 4/T^2 e^{mu psi_min}; the fitted lower constant sees >= 4.
    CHECK(b.c_phi_lower >= 4.0 - 1e-12);

    CHECK(wf.phi_t(T / 2.0, 0.3) == 0.0);

    // |phi_t| / phi^2 = |2t - T| e^{-mu psi} exactly.
    for (double t : {0.1 * T, 0.37 * T, 0.81 * T}) {
      const double x = 0.4;
      const auto p = wf.eval(t, x);
      const double lhs = std::abs(wf.phi_t(t, x)) / (p.phi * p.phi);
      const double rhs =
          std::abs(2.0 * t - T) * std::exp(-wf.mu * wf.psi.value(x));
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-11));
    }
  }
}

TEST_CASE("weights stay negative, bounded and regularized-dominance holds") {
  const auto g = default_grid();
  const auto wf = make_weights(build_psi(g, 3.0, 5.0), 1.0, 1.0);
  for (double t : {0.01, 0.25, 0.5, 0.75, 0.99}) {
    for (std::size_t i = 0; i < g.M; i += 7) {
      const auto p = wf.eval(t, g.node(i));
      CHECK(p.alpha < 0.0);
      const double theta = std::exp(2.0 * p.alpha);  // lambda = 2
      // theta is in (0,1) mathematically; near the time boundary the
      // exponent passes -700 and theta underflows to an exact 0.
      CHECK(theta < 1.0);
      CHECK(theta >= 0.0);
      if (2.0 * p.alpha > -700.0) CHECK(theta > 0.0);
      CHECK(p.phi * wf.T * wf.T >= 4.0 - 1e-12);

      const auto pr = wf.eval_reg(t, g.node(i), 0.1);
      CHECK(std::exp(2.0 * 3.0 * (p.alpha - pr.alpha)) <= 1.0 + 1e-12);
    }
  }
  // Regularized evaluation is finite at the time endpoints.
  const auto p0 = wf.eval_reg(0.0, 0.5, 0.1);
  CHECK(std::isfinite(p0.alpha));
  CHECK(std::isfinite(p0.phi));
}

TEST_CASE("lambda thresholds match hand substitution") {
  CoefficientNorms zero;
  CHECK(lambda_threshold_backward(zero, 1.0, 1.0).value ==
        doctest::Approx(2.0).epsilon(1e-14));
  CHECK(lambda_threshold_forward(zero, 1.0, 1.0).value ==
        doctest::Approx(2.0).epsilon(1e-14));

  // Doubling |beta| quadruples its contribution.
  CoefficientNorms b1, b2;
  b1.beta = 0.7;
  b2.beta = 1.4;
  const double base = lambda_threshold_backward(zero, 1.5, 1.0).value;
  const double d1 = lambda_threshold_backward(b1, 1.5, 1.0).value - base;
  const double d2 = lambda_threshold_backward(b2, 1.5, 1.0).value - base;
  CHECK(d2 == doctest::Approx(4.0 * d1).epsilon(1e-12));

  // The two pairs differ exactly in the a2 exponent: 2/3 vs 2.
  CoefficientNorms a2only;
  a2only.a2 = 8.0;
  const double T = 1.0;
  const double db = lambda_threshold_backward(a2only, T, 1.0).value -
                    lambda_threshold_backward(zero, T, 1.0).value;
  const double df = lambda_threshold_forward(a2only, T, 1.0).value -
                    lambda_threshold_forward(zero, T, 1.0).value;
  CHECK(db == doctest::Approx(T * T * std::cbrt(64.0)).epsilon(1e-12));  // 8^{2/3}
  CHECK(df == doctest::Approx(T * T * 64.0).epsilon(1e-12));             // 8^2
}

TEST_CASE("cost exponents match hand substitution") {
  CoefficientNorms zero;
  CHECK(cost_exponent_forward(zero, 1.0) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(cost_exponent_forward(zero, 1e-6) > 1e5);

  // Doubling a2 raises the backward exponent by 3 |a2|^2 (1 + T).
  CoefficientNorms s1, s2;
  s1.a2 = 0.9;
  s2.a2 = 1.8;
  for (double T : {0.5, 1.0, 2.0}) {
    const double inc =
        cost_exponent_backward(s2, T) - cost_exponent_backward(s1, T);
    CHECK(inc == doctest::Approx(3.0 * 0.81 * (1.0 + T)).epsilon(1e-12));
  }
}

TEST_CASE("thresholds and exponents are monotone in norms and horizon") {
  CoefficientNorms base;
  base.a1 = 0.3;
  base.a2 = 0.2;
  base.beta = 0.5;
  base.B1 = 0.1;
  base.B2 = 0.4;
  base.B = 0.6;
  const double T = 1.3;

  auto bump = [&](auto field) {
    CoefficientNorms c = base;
    c.*field += 0.75;
    return c;
  };
  for (auto field : {&CoefficientNorms::a1, &CoefficientNorms::a2,
                     &CoefficientNorms::beta, &CoefficientNorms::B1,
                     &CoefficientNorms::B2, &CoefficientNorms::B}) {
    const auto c = bump(field);
    CHECK(lambda_threshold_backward(c, T, 1.0).value >=
          lambda_threshold_backward(base, T, 1.0).value);
    CHECK(lambda_threshold_forward(c, T, 1.0).value >=
          lambda_threshold_forward(base, T, 1.0).value);
    CHECK(cost_exponent_forward(c, T) >= cost_exponent_forward(base, T));
    CHECK(cost_exponent_backward(c, T) >= cost_exponent_backward(base, T));
  }
  CHECK(lambda_threshold_backward(base, 2.0, 1.0).value >=
        lambda_threshold_backward(base, 1.0, 1.0).value);
  CHECK(lambda_threshold_forward(base, 2.0, 1.0).value >=
        lambda_threshold_forward(base, 1.0, 1.0).value);
}
