#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "spcontrol/errors.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"

using namespace spc;

namespace {

AdaptedField random_field(const NoiseTree& tree, std::size_t levels,
                          std::size_t width, std::mt19937_64& rng) {
  AdaptedField f(tree, levels, width);
  for (std::size_t k = 0; k < levels; ++k)
    f.level_data(k) = fields::rough_level(tree, k, width, rng).values;
  return f;
}

}  // namespace

TEST_CASE("coefficient tables interpolate their samples") {
  const auto c = Coefficient::table(2.0, 3, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(c(0.0, 0.0) == doctest::Approx(0.0));
  CHECK(c(2.0, 1.0) == doctest::Approx(8.0));
  CHECK(c(1.0, 0.5) == doctest::Approx(4.0));
  CHECK(c(0.5, 0.25) == doctest::Approx((0.0 + 1.0 + 3.0 + 4.0) / 4.0));
  CHECK_THROWS_AS(Coefficient::table(1.0, 1, 3, {0, 1, 2}), ConfigInvalid);
}

TEST_CASE("zero data stays zero") {
  const auto grid = build_grid(12, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(3, 1.0);
  ProblemInstance inst;
  inst.kind = ProblemKind::GeneralForward;
  inst.initial.assign(grid.M, 0.0);
  const auto b = solve_forward(grid, tree, inst);
  for (std::size_t k = 0; k <= 3; ++k)
    for (double v : b.state.level_data(k)) CHECK(v == 0.0);
}

TEST_CASE("spatially constant reaction follows the euler product") {
  const auto grid = build_grid(12, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(16, 1.0);
  const double c = 0.7;
  CoefficientSet coeffs;
  coeffs.a1 = c;
  const auto ws =
      build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, false);

  AdaptedField y(tree, 17, grid.M);
  for (auto& v : y.level_data(0)) v = 1.0;
  forward_sweep(ws, y, nullptr, nullptr);

  for (std::size_t k = 1; k <= 16; ++k) {
    const double expected = std::pow(1.0 + c * tree.dt, static_cast<double>(k));
    CHECK(y.at(k, 0)[grid.M / 2] == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK(y.at(16, 0)[0] == doctest::Approx(std::exp(c)).epsilon(0.05));
}

TEST_CASE("pure noise coefficient gives the increment product martingale") {
  const auto grid = build_grid(10, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(5, 1.0);
  const double sigma = 0.8;
  CoefficientSet coeffs;
  coeffs.a2 = sigma;
  const auto ws =
      build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, false);

  AdaptedField y(tree, 6, grid.M);
  for (auto& v : y.level_data(0)) v = 1.0;
  forward_sweep(ws, y, nullptr, nullptr);

  for (std::size_t n = 0; n < tree.nodes_at(5); ++n) {
    double prod = 1.0;
    for (std::size_t k = 0; k < 5; ++k) {
      const std::size_t side = (n >> (4 - k)) & 1;
      prod *= 1.0 + sigma * tree.increment(side);
    }
    CHECK(y.at(5, n)[3] == doctest::Approx(prod).epsilon(1e-12));
  }
  LevelField leaf{5, grid.M, y.level_data(5)};
  CHECK(expectation(tree, leaf)[3] == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("constants are a backward equilibrium under Neumann") {
  const auto grid = build_grid(9, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(4, 1.0);
  ProblemInstance inst;
  inst.kind = ProblemKind::GeneralBackward;
  inst.terminal =
      LevelField{4, grid.M, std::vector<double>(tree.nodes_at(4) * grid.M, 1.0)};
  const auto b = solve_backward(grid, tree, inst);
  for (std::size_t k = 0; k <= 4; ++k)
    for (double v : b.state.level_data(k))
      CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t k = 0; k < 4; ++k)
    for (double v : b.mart_half.level_data(k)) CHECK(std::abs(v) <= 1e-13);
}

TEST_CASE("adjoint with zero lower-order terms equals the bare backward solve") {
  const auto grid = build_grid(11, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(3, 1.0);
  std::mt19937_64 rng(2);
  const auto leaf = fields::rough_level(tree, 3, grid.M, rng);

  ProblemInstance adj;
  adj.kind = ProblemKind::AdjointBackward;
  adj.coeffs.beta = 0.0;
  adj.terminal = leaf;

  ProblemInstance gen;
  gen.kind = ProblemKind::GeneralBackward;
  gen.terminal = leaf;

  const auto ba = solve_backward(grid, tree, adj);
  const auto bg = solve_backward(grid, tree, gen);
  for (std::size_t k = 0; k <= 3; ++k) {
    const auto& xa = ba.state.level_data(k);
    const auto& xg = bg.state.level_data(k);
    for (std::size_t j = 0; j < xa.size(); ++j) CHECK(xa[j] == xg[j]);
  }
}

TEST_CASE("solvers are linear in the data") {
  const auto grid = build_grid(14, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(3, 0.8);
  std::mt19937_64 rng(6);
  CoefficientSet coeffs;
  coeffs.a1 = 0.4;
  coeffs.a2 = -0.6;
  coeffs.B1 = 0.2;
  coeffs.B2 = 0.1;
  coeffs.beta = 0.3;
  const auto ws =
      build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);

  const auto g1 = random_field(tree, 3, grid.M, rng);
  const auto g2 = random_field(tree, 3, grid.M, rng);
  AdaptedField gsum(tree, 3, grid.M);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < gsum.level_data(k).size(); ++j)
      gsum.level_data(k)[j] = 2.0 * g1.level_data(k)[j] - g2.level_data(k)[j];

  AdaptedField y1(tree, 4, grid.M), y2(tree, 4, grid.M), ys(tree, 4, grid.M);
  forward_sweep(ws, y1, &g1, nullptr);
  forward_sweep(ws, y2, &g2, nullptr);
  forward_sweep(ws, ys, &gsum, nullptr);
  for (std::size_t k = 0; k <= 3; ++k)
    for (std::size_t j = 0; j < ys.level_data(k).size(); ++j)
      CHECK(ys.level_data(k)[j] ==
            doctest::Approx(2.0 * y1.level_data(k)[j] - y2.level_data(k)[j])
                .epsilon(1e-11));
}

TEST_CASE("neumann diffusion preserves the discrete mean") {
  const auto grid = build_grid(13, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(8);
  CoefficientSet coeffs;
  coeffs.a = 1.7;
  const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, false);

  AdaptedField y(tree, 5, grid.M);
  y.level_data(0) = fields::smooth_profile(grid.M, rng);
  for (auto& v : y.level_data(0)) v += 1.0;
  forward_sweep(ws, y, nullptr, nullptr);

  const double mean0 = grid.integrate(y.at(0, 0));
  for (std::size_t k = 1; k <= 4; ++k)
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n)
      CHECK(grid.integrate(y.at(k, n)) ==
            doctest::Approx(mean0).epsilon(1e-12));
}

TEST_CASE("dissipative robin problems have non-increasing energy") {
  const auto grid = build_grid(15, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(5, 1.0);
  std::mt19937_64 rng(10);
  ProblemInstance inst;
  inst.kind = ProblemKind::ForwardControlled;  // Robin operator, no controls
  inst.coeffs.beta = 0.5;
  inst.initial = fields::smooth_profile(grid.M, rng);
  const auto b = solve_forward(grid, tree, inst);
  for (std::size_t k = 0; k + 1 < b.energy.size(); ++k)
    CHECK(b.energy[k + 1] <= b.energy[k] + 1e-14);
}

TEST_CASE("duality residual certifies the transposed pair on both forms") {
  const auto grid = build_grid(16, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  for (int inst = 0; inst < 6; ++inst) {
    CoefficientSet coeffs;
    coeffs.a = 1.0 + 0.5 * std::abs(u(rng)) + 0.5;
    coeffs.a1 = u(rng);
    coeffs.a2 = u(rng);
    coeffs.B1 = 0.5 * u(rng);
    coeffs.B2 = 0.5 * u(rng);
    coeffs.B = 0.5 * u(rng);
    coeffs.beta = std::abs(u(rng));
    const auto form = (inst % 2) ? CoeffForm::Divergence : CoeffForm::NonDivergence;
    const auto ws = build_workspace(grid, tree, coeffs, form, true);

    const auto g = random_field(tree, 4, grid.M, rng);
    const auto q = random_field(tree, 4, grid.M, rng);
    const auto sigma = random_field(tree, 4, grid.M, rng);

    AdaptedField y(tree, 5, grid.M);
    y.level_data(0) = fields::smooth_profile(grid.M, rng);
    forward_sweep(ws, y, &g, &q);

    AdaptedField z(tree, 5, grid.M), zbar(tree, 4, grid.M), zhat(tree, 4, grid.M);
    z.level_data(4) = fields::rough_level(tree, 4, grid.M, rng).values;
    backward_sweep(ws, z, zbar, zhat, &sigma);

    CHECK(ito_duality_residual(tree, grid.quad_w, y, z, zbar, zhat, &g, &q,
                               &sigma) <= 1e-10);
  }
}

TEST_CASE("energy report of the zero solution is identically zero") {
  const auto grid = build_grid(10, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(3, 1.0);
  CoefficientSet coeffs;
  const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, false);
  SolutionBundle b;
  b.state = AdaptedField(tree, 4, grid.M);
  b.mean_half = AdaptedField(tree, 3, grid.M);
  b.mart_half = AdaptedField(tree, 3, grid.M);
  backward_sweep(ws, b.state, b.mean_half, b.mart_half, nullptr);
  const auto rep = energy_estimate(ws, b, nullptr, true);
  for (double v : rep.energy) CHECK(v == 0.0);
  for (double v : rep.dissipation) CHECK(v == 0.0);
  CHECK(rep.fitted_C == 0.0);
}

TEST_CASE("energy report terms reproduce the step identity") {
  const auto grid = build_grid(14, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(14);
  CoefficientSet coeffs;
  coeffs.a1 = 0.5;
  coeffs.a2 = 0.4;
  coeffs.B1 = 0.2;
  coeffs.B2 = 0.2;
  coeffs.beta = 0.6;
  const auto ws =
      build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);

  const auto sigma = random_field(tree, 4, grid.M, rng);
  SolutionBundle b;
  b.state = AdaptedField(tree, 5, grid.M);
  b.mean_half = AdaptedField(tree, 4, grid.M);
  b.mart_half = AdaptedField(tree, 4, grid.M);
  b.state.level_data(4) = fields::rough_level(tree, 4, grid.M, rng).values;
  backward_sweep(ws, b.state, b.mean_half, b.mart_half, &sigma);

  const auto rep = energy_estimate(ws, b, &sigma, true);
  CHECK(rep.identity_residual <= 1e-10);
  CHECK(std::isfinite(rep.fitted_C));
}

TEST_CASE("backward diffusion with nonnegative robin term is dissipative") {
  const auto grid = build_grid(12, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(15);
  CoefficientSet coeffs;
  coeffs.beta = 0.8;
  const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, true);

  SolutionBundle b;
  b.state = AdaptedField(tree, 5, grid.M);
  b.mean_half = AdaptedField(tree, 4, grid.M);
  b.mart_half = AdaptedField(tree, 4, grid.M);
  b.state.level_data(4) = fields::rough_level(tree, 4, grid.M, rng).values;
  backward_sweep(ws, b.state, b.mean_half, b.mart_half, nullptr);

  const auto rep = energy_estimate(ws, b, nullptr, true);
  // Backward in time |z| cannot grow: energy is nondecreasing in the level.
  for (std::size_t k = 0; k + 1 < rep.energy.size(); ++k)
    CHECK(rep.energy[k] <= rep.energy[k + 1] + 1e-14);
}

TEST_CASE("energy bound constant is stable under grid refinement") {
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(16);
  CoefficientSet coeffs;
  coeffs.a1 = 0.5;
  coeffs.a2 = 0.5;
  coeffs.B2 = 0.3;
  coeffs.beta = 0.4;

  double fitted[2] = {0.0, 0.0};
  std::size_t idx = 0;
  for (std::size_t M : {16u, 32u}) {
    const auto grid = build_grid(M, {0.25, 0.5}, {0.3, 0.45});
    const auto ws =
        build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);
    SolutionBundle b;
    b.state = AdaptedField(tree, 5, grid.M);
    b.mean_half = AdaptedField(tree, 4, grid.M);
    b.mart_half = AdaptedField(tree, 4, grid.M);
    std::mt19937_64 sample_rng(99);
    b.state.level_data(4) =
        fields::smooth_level(tree, 4, grid.M, sample_rng).values;
    backward_sweep(ws, b.state, b.mean_half, b.mart_half, nullptr);
    const auto rep = energy_estimate(ws, b, nullptr, true);
    CHECK(std::isfinite(rep.fitted_C));
    fitted[idx++] = rep.fitted_C;
  }
  if (fitted[0] > 0.0 && fitted[1] > 0.0) {
    CHECK(fitted[1] / fitted[0] <= 3.0);
    CHECK(fitted[0] / fitted[1] <= 3.0);
  }
}

TEST_CASE("advection-dominant steps raise a diagnostic") {
  const auto grid = build_grid(64, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(2, 1.0);
  ProblemInstance inst;
  inst.kind = ProblemKind::ForwardControlled;
  inst.coeffs.B1 = 40.0;
  inst.initial.assign(grid.M, 0.0);
  const auto b = solve_forward(grid, tree, inst);
  CHECK(!b.diagnostics.empty());
}
