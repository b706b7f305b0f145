// Acceptance gate: one line per criterion, nonzero exit on any failure.
// Tolerances are pinned here, next to the check they gate.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "spcontrol/estimates.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/hum.hpp"
#include "spcontrol/kkt_oracle.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"
#include "spcontrol/weights.hpp"

using namespace spc;

namespace {

int failures = 0;

void line(bool ok, const std::string& msg) {
  std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", msg.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

double max_field_diff(const AdaptedField& a, const AdaptedField& b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < std::min(a.levels(), b.levels()); ++k) {
    const auto& da = a.level_data(k);
    const auto& db = b.level_data(k);
    for (std::size_t i = 0; i < da.size(); ++i)
      worst = std::max(worst, std::abs(da[i] - db[i]));
  }
  return worst;
}

double max_field_abs(const AdaptedField& a) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.levels(); ++k)
    for (double v : a.level_data(k)) worst = std::max(worst, std::abs(v));
  return worst;
}

std::vector<double> sin_bump(const SpatialGrid& grid) {
  std::vector<double> y0(grid.M);
  for (std::size_t i = 0; i < grid.M; ++i)
    y0[i] = std::sin(std::numbers::pi * grid.nodes[i]);
  return y0;
}

double leaf_sq(const SpatialGrid& grid, const NoiseTree& tree,
               const LevelField& f) {
  double s = 0.0;
  for (std::size_t n = 0; n < tree.nodes_at(f.level); ++n)
    s += grid.inner(f.at(n), f.at(n));
  return s * tree.prob(f.level);
}

// ---------------------------------------------------------------------
// 1. Adjoint consistency: transposed sweeps satisfy the product identity.

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = build_grid(16, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> amp(0.5, 2.0), one(-1.0, 1.0),
      half(-0.5, 0.5), pos(0.0, 1.0);

  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    CoefficientSet coeffs;
    coeffs.a = amp(rng);
    coeffs.a1 = one(rng);
    coeffs.a2 = one(rng);
    coeffs.B1 = half(rng);
    coeffs.B2 = half(rng);
    coeffs.B = half(rng);
    coeffs.beta = pos(rng);
    const auto form =
        (inst % 2) ? CoeffForm::Divergence : CoeffForm::NonDivergence;
    const auto ws = build_workspace(grid, tree, coeffs, form, true);

    AdaptedField g(tree, 4, grid.M), q(tree, 4, grid.M), sigma(tree, 4, grid.M);
    for (std::size_t k = 0; k < 4; ++k) {
      g.level_data(k) = fields::rough_level(tree, k, grid.M, rng).values;
      q.level_data(k) = fields::rough_level(tree, k, grid.M, rng).values;
      sigma.level_data(k) = fields::rough_level(tree, k, grid.M, rng).values;
    }

    AdaptedField y(tree, 5, grid.M);
    const auto y0 = fields::smooth_profile(grid.M, rng);
    std::copy(y0.begin(), y0.end(), y.at(0, 0).begin());
    forward_sweep(ws, y, &g, &q);

    AdaptedField z(tree, 5, grid.M), zbar(tree, 4, grid.M), zhat(tree, 4, grid.M);
    z.level_data(4) = fields::rough_level(tree, 4, grid.M, rng).values;
    backward_sweep(ws, z, zbar, zhat, &sigma);

    worst = std::max(worst, ito_duality_residual(tree, grid.quad_w, y, z, zbar,
                                                 zhat, &g, &q, &sigma));
  }
  const double secs = seconds_since(t0);
  line(worst <= 1e-10 && secs < 10.0,
       "1. adjoint consistency: 20 instances, max duality residual " +
           fmt(worst) + " (limit 1e-10), " + fmt(secs) + " s (limit 10)");
}

// ---------------------------------------------------------------------
// 2. Oracle equivalence: CG matches the dense first-order system.

void criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = build_grid(4, {0.2, 0.8}, {0.3, 0.7});
  const auto tree = build_tree(2, 1.0);
  CoefficientSet coeffs;
  coeffs.a1 = 0.5;
  coeffs.a2 = 0.4;
  coeffs.B1 = 0.2;
  coeffs.B2 = 0.15;
  coeffs.B = 0.3;
  coeffs.beta = 0.5;
  std::mt19937_64 rng(2);

  double worst_diff = 0.0, worst_res = 0.0;

  HumConfig cfg;
  cfg.epsilon = 1e-2;
  cfg.cg_tol = 1e-12;
  cfg.cg_max_iters = 600;

  {
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
    const auto y0 = fields::smooth_profile(grid.M, rng);
    const auto r = solve_hum_forward(ws, y0, cfg);
    const auto orc = kkt_oracle_forward(ws, y0, cfg);
    worst_diff = std::max({worst_diff, max_field_diff(r.u, orc.u),
                           max_field_diff(r.v, orc.v)});
    worst_res = std::max(worst_res, orc.max_equation_residual);
  }
  {
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::Divergence, true);
    const auto yT = fields::rough_level(tree, 2, grid.M, rng);
    const auto r = solve_hum_backward(ws, yT, cfg);
    const auto orc = kkt_oracle_backward(ws, yT, cfg);
    worst_diff = std::max(worst_diff, max_field_diff(r.u, orc.u));
    worst_res = std::max(worst_res, orc.max_equation_residual);
  }
  {
    CoefficientSet bare;
    const auto ws = build_workspace(grid, tree, bare, CoeffForm::None, false);
    const auto wf = make_weights(build_psi(grid, 3.0, 5.0), 1.0, tree.T);
    AdaptedField zdata(tree, 2, grid.M);
    for (std::size_t k = 0; k < 2; ++k)
      zdata.level_data(k) = fields::smooth_level(tree, k, grid.M, rng).values;
    WeightedHumConfig wcfg;
    wcfg.lambda = 2.0;
    wcfg.cg_tol = 1e-12;
    wcfg.cg_max_iters = 800;

    const auto rf = solve_weighted_hum_forward(ws, wf, zdata, wcfg);
    const auto of = kkt_oracle_weighted_forward(ws, wf, zdata, wcfg);
    worst_diff = std::max({worst_diff, max_field_diff(rf.u, of.u),
                           max_field_diff(rf.v, of.v)});
    worst_res = std::max(worst_res, of.max_equation_residual);

    const auto rb = solve_weighted_hum_backward(ws, wf, zdata, wcfg);
    const auto ob = kkt_oracle_weighted_backward(ws, wf, zdata, wcfg);
    worst_diff = std::max(worst_diff, max_field_diff(rb.u, ob.u));
    worst_res = std::max(worst_res, ob.max_equation_residual);
  }

  const double secs = seconds_since(t0);
  line(worst_diff <= 1e-8 && worst_res <= 1e-12 && secs < 30.0,
       "2. oracle equivalence: four variants, max control diff " +
           fmt(worst_diff) + " (limit 1e-8), oracle residual " + fmt(worst_res) +
           " (limit 1e-12), " + fmt(secs) + " s (limit 30)");
}

// ---------------------------------------------------------------------
// 3/4. Null-control decay on the reference heat instance.

CoefficientSet heat_forward_coeffs() {
  CoefficientSet c;
  c.a = 1.0;
  c.a1 = 1.0;
  c.a2 = 1.0;
  c.B1 = 0.1;
  c.B2 = 0.1;
  c.beta = 0.5;
  return c;
}

CoefficientSet heat_backward_coeffs() {
  CoefficientSet c;
  c.a = 1.0;
  c.a1 = 1.0;
  c.a2 = 1.0;
  c.B = 0.1;
  c.beta = 0.5;
  return c;
}

void criterion_3() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = build_grid(64, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(10, 1.0);
  const auto ws = build_workspace(grid, tree, heat_forward_coeffs(),
                                  CoeffForm::NonDivergence, true);
  const auto y0 = sin_bump(grid);

  HumConfig cfg;
  cfg.cg_tol = 1e-10;
  cfg.cg_max_iters = 4000;

  double worst_identity = 0.0;
  std::vector<double> terminal;
  double final_ratio = 0.0;
  for (double eps : {1e-1, 1e-2, 1e-3}) {
    cfg.epsilon = eps;
    const auto r = solve_hum_forward(ws, y0, cfg);
    const double dual_sq = leaf_sq(grid, tree, r.dual_leaf);
    const double rel = std::abs(r.terminal_sq - eps * eps * dual_sq) /
                       std::max(r.terminal_sq, 1e-300);
    worst_identity = std::max(worst_identity, rel);
    terminal.push_back(r.terminal_sq);
    final_ratio = r.terminal_sq / r.data_sq;
  }
  const bool monotone = terminal[0] > terminal[1] && terminal[1] > terminal[2];
  const double secs = seconds_since(t0);
  line(worst_identity <= 1e-8 && monotone && final_ratio <= 1e-3 && secs < 300.0,
       "3. forward null control: terminal identity defect " + fmt(worst_identity) +
           " (limit 1e-8), E|y(T)|^2 " + fmt(terminal[0]) + " > " +
           fmt(terminal[1]) + " > " + fmt(terminal[2]) + ", final ratio " +
           fmt(final_ratio) + " (limit 1e-3), " + fmt(secs) + " s (limit 300)");
}

void criterion_4() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = build_grid(64, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(10, 1.0);
  const auto ws = build_workspace(grid, tree, heat_backward_coeffs(),
                                  CoeffForm::Divergence, true);
  std::mt19937_64 rng(4);
  const auto yT = fields::rough_level(tree, 10, grid.M, rng);

  HumConfig cfg;
  cfg.cg_tol = 1e-10;
  cfg.cg_max_iters = 4000;

  std::vector<double> initial;
  double final_ratio = 0.0;
  for (double eps : {1e-1, 1e-2, 1e-3}) {
    cfg.epsilon = eps;
    const auto r = solve_hum_backward(ws, yT, cfg);
    initial.push_back(r.terminal_sq);
    final_ratio = r.terminal_sq / r.data_sq;
  }
  const bool monotone = initial[0] > initial[1] && initial[1] > initial[2];
  const double secs = seconds_since(t0);
  line(monotone && final_ratio <= 1e-3 && secs < 300.0,
       "4. backward null control: |y(0)|^2 " + fmt(initial[0]) + " > " +
           fmt(initial[1]) + " > " + fmt(initial[2]) + ", final ratio " +
           fmt(final_ratio) + " (limit 1e-3), " + fmt(secs) + " s (limit 300)");
}

// ---------------------------------------------------------------------
// 5. Cost-bound structure under coefficient sweeps.

void criterion_5() {
  const auto grid = build_grid(64, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(10, 1.0);
  HumConfig cfg;
  cfg.epsilon = 1e-3;
  cfg.cg_tol = 1e-9;
  cfg.cg_max_iters = 4000;

  auto spread_of = [](const std::vector<double>& fitted) {
    const auto [lo, hi] = std::minmax_element(fitted.begin(), fitted.end());
    const bool same_sign = (*lo > 0.0) == (*hi > 0.0) && *lo != 0.0;
    if (!same_sign) return std::numeric_limits<double>::infinity();
    return std::max(std::abs(*lo), std::abs(*hi)) /
           std::min(std::abs(*lo), std::abs(*hi));
  };

  {
    const auto y0 = sin_bump(grid);
    std::vector<double> logratio, fitted;
    for (double a1 : {0.0, 1.0, 2.0, 4.0}) {
      auto coeffs = heat_forward_coeffs();
      coeffs.a1 = a1;
      const auto ws =
          build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
      const auto r = solve_hum_forward(ws, y0, cfg);
      const double lr = std::log((r.cost_u + r.cost_v) / r.data_sq);
      logratio.push_back(lr);
      fitted.push_back(lr / r.exponent);
    }
    const bool nondecreasing =
        std::is_sorted(logratio.begin(), logratio.end(),
                       [](double x, double y) { return x > y + 1e-12; });
    const double spread = spread_of(fitted);
    line(nondecreasing && spread < 5.0,
         "5a. forward cost sweep a1 in {0,1,2,4}: log cost ratio " +
             fmt(logratio[0]) + " .. " + fmt(logratio[3]) +
             " nondecreasing, fitted constant spread " + fmt(spread) +
             " (limit 5)");
  }
  {
    std::mt19937_64 rng(5);
    const auto yT = fields::rough_level(tree, 10, grid.M, rng);
    std::vector<double> logratio, fitted;
    for (double a2 : {0.0, 1.0, 2.0, 4.0}) {
      auto coeffs = heat_backward_coeffs();
      coeffs.a2 = a2;
      const auto ws =
          build_workspace(grid, tree, coeffs, CoeffForm::Divergence, true);
      const auto r = solve_hum_backward(ws, yT, cfg);
      const double lr = std::log(r.cost_u / r.data_sq);
      logratio.push_back(lr);
      fitted.push_back(lr / r.exponent);
    }
    const bool nondecreasing =
        std::is_sorted(logratio.begin(), logratio.end(),
                       [](double x, double y) { return x > y + 1e-12; });
    const double spread = spread_of(fitted);
    line(nondecreasing && spread < 5.0,
         "5b. backward cost sweep a2 in {0,1,2,4}: log cost ratio " +
             fmt(logratio[0]) + " .. " + fmt(logratio[3]) +
             " nondecreasing, fitted constant spread " + fmt(spread) +
             " (limit 5)");
  }
}

// ---------------------------------------------------------------------
// 6. Two-sided weighted energy bounds over the lambda window.

void criterion_6() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = build_grid(32, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(6, 1.0);
  const auto wf = make_weights(build_psi(grid, 3.0, 5.0), 1.0, tree.T);

  bool ok = true;
  std::string detail;

  {
    const auto coeffs = heat_forward_coeffs();
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
    const double thr = lambda_threshold_backward(ws.norms, tree.T, 1.0).value;
    std::vector<double> lams;
    for (double f : {1.0, 1.5, 2.0, 3.0, 4.0}) lams.push_back(f * thr);

    std::mt19937_64 rng(6);
    std::vector<CarlemanReport> reports;
    for (int s = 0; s < 20; ++s) {
      SolutionBundle b;
      b.state = AdaptedField(tree, 7, grid.M);
      b.mean_half = AdaptedField(tree, 6, grid.M);
      b.mart_half = AdaptedField(tree, 6, grid.M);
      b.state.level_data(6) = fields::rough_level(tree, 6, grid.M, rng).values;
      backward_sweep(ws, b.state, b.mean_half, b.mart_half, nullptr);
      const auto src =
          substitution_backward(grid, tree, coeffs, b.state, b.mart_half);
      reports.push_back(carleman_eval_backward(ws, b, src, wf, lams));
    }
    const auto batch = aggregate_reports(reports);
    ok = ok && std::isfinite(batch.ratio_max) && batch.ratio_max > 0.0 &&
         batch.spread < 3.0;
    detail += "backward C " + fmt(batch.ratio_max) + " spread " +
              fmt(batch.spread);
  }
  {
    CoefficientSet coeffs;
    coeffs.a = 1.0;
    coeffs.a1 = 1.0;
    coeffs.a2 = 1.0;
    coeffs.B = 0.1;
    coeffs.beta = 0.5;
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::Divergence, true);
    const double thr = lambda_threshold_forward(ws.norms, tree.T, 1.0).value;
    std::vector<double> lams;
    for (double f : {1.0, 1.5, 2.0, 3.0, 4.0}) lams.push_back(f * thr);

    std::mt19937_64 rng(7);
    std::vector<CarlemanReport> reports;
    for (int s = 0; s < 20; ++s) {
      AdaptedField z(tree, 7, grid.M);
      const auto z0 = fields::smooth_profile(grid.M, rng);
      std::copy(z0.begin(), z0.end(), z.at(0, 0).begin());
      forward_sweep(ws, z, nullptr, nullptr);
      SolutionBundle b;
      b.state = z;
      const auto src = substitution_forward(grid, tree, coeffs, b.state);
      reports.push_back(carleman_eval_forward(ws, b, src, wf, lams));
    }
    const auto batch = aggregate_reports(reports);
    ok = ok && std::isfinite(batch.ratio_max) && batch.ratio_max > 0.0 &&
         batch.spread < 3.0;
    detail += "; forward C " + fmt(batch.ratio_max) + " spread " +
              fmt(batch.spread);
  }

  const double secs = seconds_since(t0);
  line(ok && secs < 120.0,
       "6. weighted energy bounds, 20+20 adjoint samples over [thr,4thr]: " +
           detail + " (spread limit 3), " + fmt(secs) + " s (limit 120)");
}

// ---------------------------------------------------------------------
// 7. Observability ratios at ensemble size 100.

void criterion_7() {
  const auto grid = build_grid(24, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(6, 1.0);

  bool ok = true;
  std::string detail;

  double scale_diff = 0.0;
  {
    std::vector<double> fitted;
    double maxr = 0.0;
    for (double a1 : {0.0, 1.0, 4.0}) {
      CoefficientSet coeffs;
      coeffs.a1 = a1;
      coeffs.a2 = 0.5;
      coeffs.beta = 0.3;
      const auto ws =
          build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
      std::mt19937_64 rng(8);
      std::vector<LevelField> samples;
      for (int s = 0; s < 99; ++s)
        samples.push_back(fields::rough_level(tree, 6, grid.M, rng));
      LevelField scaled = samples[0];
      for (auto& v : scaled.values) v *= 4.0;  // exact binary scaling
      samples.push_back(scaled);
      const auto rep = observability_forward(ws, samples);
      ok = ok && std::isfinite(rep.max_ratio) && rep.max_ratio > 0.0;
      scale_diff = std::max(
          scale_diff, std::abs(rep.ratios[99] / rep.ratios[0] - 1.0));
      fitted.push_back(rep.fitted_c);
      maxr = std::max(maxr, rep.max_ratio);
    }
    ok = ok && fitted[0] <= fitted[1] + 1e-12 && fitted[1] <= fitted[2] + 1e-12;
    detail += "forward fitted " + fmt(fitted[0]) + " <= " + fmt(fitted[1]) +
              " <= " + fmt(fitted[2]) + ", max ratio " + fmt(maxr);
  }
  {
    std::vector<double> fitted;
    for (double a2 : {0.0, 1.0, 2.0}) {
      CoefficientSet coeffs;
      coeffs.a2 = a2;
      coeffs.beta = 0.3;
      const auto ws =
          build_workspace(grid, tree, coeffs, CoeffForm::Divergence, true);
      std::mt19937_64 rng(9);
      std::vector<std::vector<double>> samples;
      for (int s = 0; s < 99; ++s)
        samples.push_back(fields::smooth_profile(grid.M, rng));
      auto scaled = samples[0];
      for (auto& v : scaled) v *= 4.0;
      samples.push_back(scaled);
      const auto rep = observability_backward(ws, samples);
      ok = ok && std::isfinite(rep.max_ratio) && rep.max_ratio > 0.0;
      scale_diff = std::max(
          scale_diff, std::abs(rep.ratios[99] / rep.ratios[0] - 1.0));
      fitted.push_back(rep.fitted_c);
    }
    ok = ok && fitted[0] <= fitted[1] + 1e-12 && fitted[1] <= fitted[2] + 1e-12;
    detail += "; backward fitted " + fmt(fitted[0]) + " <= " + fmt(fitted[1]) +
              " <= " + fmt(fitted[2]);
  }

  ok = ok && scale_diff == 0.0;
  line(ok, "7. observability ensembles (100 samples): " + detail +
               ", scaling invariance defect " + fmt(scale_diff) + " (exact)");
}

// ---------------------------------------------------------------------
// 8. Structural zero cases.

void criterion_8() {
  const auto grid = build_grid(20, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(4, 1.0);
  bool ok = true;
  std::string detail;

  {  // zero data in, zero controls and states out
    const auto ws = build_workspace(grid, tree, heat_forward_coeffs(),
                                    CoeffForm::NonDivergence, true);
    HumConfig cfg;
    cfg.epsilon = 1e-2;
    const std::vector<double> zeros(grid.M, 0.0);
    const auto r = solve_hum_forward(ws, zeros, cfg);
    const double out = std::max({max_field_abs(r.u), max_field_abs(r.v),
                                 max_field_abs(r.state.state), r.terminal_sq,
                                 r.cost_u, r.cost_v});
    ok = ok && out == 0.0;
    detail += "zero-data output " + fmt(out);
  }
  {  // constants are an equilibrium of the Neumann pair
    CoefficientSet coeffs;
    coeffs.a = 1.4;
    const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, false);
    AdaptedField z(tree, 5, grid.M), zbar(tree, 4, grid.M), zhat(tree, 4, grid.M);
    for (auto& v : z.level_data(4)) v = 2.5;
    backward_sweep(ws, z, zbar, zhat, nullptr);
    double dev = 0.0;
    for (double v : z.level_data(0)) dev = std::max(dev, std::abs(v - 2.5));
    ok = ok && dev / 2.5 <= 1e-12 && max_field_abs(zhat) <= 1e-13 * 2.5;
    detail += "; constant equilibrium drift " + fmt(dev / 2.5) + " (limit 1e-12)";
  }
  {  // martingale part of the Brownian field is the constant 1
    LevelField w{1, 1, {tree.brownian_at(1, 0), tree.brownian_at(1, 1)}};
    const auto zpart = martingale_part(tree, w);
    const double dev = std::abs(zpart.values[0] - 1.0);
    ok = ok && dev <= 1e-14;
    detail += "; Z of W deviates " + fmt(dev) + " (limit 1e-14)";
  }
  {  // mean conservation without lower-order terms
    CoefficientSet coeffs;
    coeffs.a = 0.9;
    const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, false);
    std::mt19937_64 rng(10);
    AdaptedField y(tree, 5, grid.M);
    auto y0 = fields::smooth_profile(grid.M, rng);
    for (auto& v : y0) v += 1.0;
    std::copy(y0.begin(), y0.end(), y.at(0, 0).begin());
    forward_sweep(ws, y, nullptr, nullptr);
    const double mean0 = grid.integrate(y.at(0, 0));
    double dev = 0.0;
    for (std::size_t k = 0; k <= 4; ++k)
      for (std::size_t n = 0; n < tree.nodes_at(k); ++n)
        dev = std::max(dev, std::abs(grid.integrate(y.at(k, n)) - mean0));
    ok = ok && dev / std::abs(mean0) <= 1e-12;
    detail += "; mean drift " + fmt(dev / std::abs(mean0)) + " (limit 1e-12)";
  }

  line(ok, "8. structural zeros: " + detail);
}

// ---------------------------------------------------------------------
// 9. Scaling invariance of the normalized diagnostics.

void criterion_9() {
  const auto grid = build_grid(24, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(5, 1.0);
  std::mt19937_64 rng(11);

  double worst = 0.0;

  for (int s = 0; s < 20; ++s) {  // boundary trace ratio
    const auto z = fields::smooth_profile(grid.M, rng);
    auto scaled = z;
    for (auto& v : scaled) v *= -37.5;
    const double r1 = trace_inequality_gap(grid, z);
    const double r2 = trace_inequality_gap(grid, scaled);
    worst = std::max(worst, std::abs(r2 / r1 - 1.0));
  }

  {  // weighted energy ratio
    const auto coeffs = heat_forward_coeffs();
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
    const auto wf = make_weights(build_psi(grid, 3.0, 5.0), 1.0, tree.T);
    SolutionBundle b;
    b.state = AdaptedField(tree, 6, grid.M);
    b.mean_half = AdaptedField(tree, 5, grid.M);
    b.mart_half = AdaptedField(tree, 5, grid.M);
    b.state.level_data(5) = fields::rough_level(tree, 5, grid.M, rng).values;
    backward_sweep(ws, b.state, b.mean_half, b.mart_half, nullptr);
    auto src = substitution_backward(grid, tree, coeffs, b.state, b.mart_half);

    const double thr = lambda_threshold_backward(ws.norms, tree.T, 1.0).value;
    const std::vector<double> lams{thr, 2.0 * thr};
    const auto r1 = carleman_eval_backward(ws, b, src, wf, lams);

    for (std::size_t k = 0; k < b.state.levels(); ++k)
      for (auto& v : b.state.level_data(k)) v *= 4.0;
    for (std::size_t k = 0; k < b.mart_half.levels(); ++k)
      for (auto& v : b.mart_half.level_data(k)) v *= 4.0;
    for (auto* f : {&src.drift, &src.divergence, &src.noise, &src.flux})
      if (f->has_value())
        for (std::size_t k = 0; k < (*f)->levels(); ++k)
          for (auto& v : (*f)->level_data(k)) v *= 4.0;
    const auto r2 = carleman_eval_backward(ws, b, src, wf, lams);
    for (std::size_t j = 0; j < lams.size(); ++j)
      worst = std::max(worst, std::abs(r2.ratio[j] / r1.ratio[j] - 1.0));
  }

  {  // observability ratio (covered bitwise in 7; repeat with an odd scale)
    CoefficientSet coeffs;
    coeffs.a1 = 0.5;
    coeffs.a2 = 0.4;
    coeffs.beta = 0.3;
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
    std::vector<LevelField> samples;
    for (int s = 0; s < 10; ++s)
      samples.push_back(fields::rough_level(tree, 5, grid.M, rng));
    auto scaled = samples[0];
    for (auto& v : scaled.values) v *= -3.0;
    samples.push_back(scaled);
    const auto rep = observability_forward(ws, samples);
    worst = std::max(worst, std::abs(rep.ratios[10] / rep.ratios[0] - 1.0));
  }

  line(worst <= 1e-12,
       "9. scaling invariance: worst relative drift " + fmt(worst) +
           " (limit 1e-12)");
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures ? 1 : 0;
}
