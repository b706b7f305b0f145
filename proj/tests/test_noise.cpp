#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "spcontrol/errors.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"

using namespace spc;

namespace {

LevelField increments_at(const NoiseTree& tree, std::size_t level) {
  LevelField f{level, 1, std::vector<double>(tree.nodes_at(level), 0.0)};
  for (std::size_t n = 0; n < tree.nodes_at(level); ++n)
    f.values[n] = tree.increment(n & 1);
  return f;
}

}  // namespace

TEST_CASE("tree shapes and increments") {
  const auto t1 = build_tree(1, 1.0);
  CHECK(t1.nodes_at(0) + t1.nodes_at(1) == 3);
  CHECK(t1.dt == doctest::Approx(1.0));
  CHECK(t1.increment(0) == doctest::Approx(1.0));
  CHECK(t1.increment(1) == doctest::Approx(-1.0));

  const auto t2 = build_tree(2, 2.0);
  CHECK(t2.nodes_at(0) + t2.nodes_at(1) + t2.nodes_at(2) == 7);
  CHECK(t2.dt == doctest::Approx(1.0));

  const auto t10 = build_tree(10, 1.0);
  std::size_t total = 0;
  for (std::size_t k = 0; k <= 10; ++k) total += t10.nodes_at(k);
  CHECK(total == 2047);
  CHECK(t10.dt == doctest::Approx(0.1));
  CHECK(t10.increment(0) == doctest::Approx(std::sqrt(0.1)));

  CHECK_THROWS_AS(build_tree(23, 1.0), DepthTooLarge);
}

TEST_CASE("level probabilities sum to one and brownian paths accumulate") {
  const auto tree = build_tree(6, 1.5);
  for (std::size_t k = 0; k <= 6; ++k)
    CHECK(tree.prob(k) * static_cast<double>(tree.nodes_at(k)) ==
          doctest::Approx(1.0));
  // Node 0 always takes the + branch.
  CHECK(tree.brownian_at(3, 0) == doctest::Approx(3.0 * tree.sqrt_dt));
  CHECK(tree.brownian_at(1, 1) == doctest::Approx(-tree.sqrt_dt));
}

TEST_CASE("conditional expectation averages children") {
  const auto tree = build_tree(1, 1.0);
  const LevelField f{1, 1, {2.0, 4.0}};
  const auto c = cond_expect(tree, f);
  CHECK(c.values.size() == 1);
  CHECK(c.values[0] == doctest::Approx(3.0));

  CHECK_THROWS_AS(cond_expect(tree, LevelField{0, 1, {1.0}}), LevelMismatch);
}

TEST_CASE("tower property over two levels") {
  const auto tree = build_tree(2, 1.0);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  LevelField f{2, 1, std::vector<double>(4)};
  for (auto& v : f.values) v = n(rng);
  const auto two_step = cond_expect(tree, cond_expect(tree, f));
  const double avg4 =
      (f.values[0] + f.values[1] + f.values[2] + f.values[3]) / 4.0;
  CHECK(two_step.values[0] == doctest::Approx(avg4).epsilon(1e-15));
}

TEST_CASE("fields independent of the last increment pass through") {
  const auto tree = build_tree(3, 1.0);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  LevelField parent{2, 1, std::vector<double>(4)};
  for (auto& v : parent.values) v = n(rng);
  LevelField lifted{3, 1, std::vector<double>(8)};
  for (std::size_t i = 0; i < 8; ++i) lifted.values[i] = parent.values[i / 2];
  const auto back = cond_expect(tree, lifted);
  for (std::size_t i = 0; i < 4; ++i) CHECK(back.values[i] == parent.values[i]);
  const auto mart = martingale_part(tree, lifted);
  for (double v : mart.values) CHECK(v == 0.0);
}

TEST_CASE("martingale part reads the increment coefficient") {
  const auto tree = build_tree(4, 0.7);
  const auto dw = increments_at(tree, 3);
  const auto zm = cond_expect(tree, dw);
  const auto z = martingale_part(tree, dw);
  for (double v : zm.values) CHECK(v == doctest::Approx(0.0));
  for (double v : z.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));

  // f(n+-) = a +- b sqrt(dt)  ->  martingale part b.
  LevelField f{3, 1, std::vector<double>(8)};
  for (std::size_t n = 0; n < 8; ++n)
    f.values[n] = 2.5 + 1.75 * tree.increment(n & 1);
  const auto mb = martingale_part(tree, f);
  for (double v : mb.values) CHECK(v == doctest::Approx(1.75).epsilon(1e-14));
}

TEST_CASE("expectation weighs paths uniformly") {
  const auto tree = build_tree(5, 2.0);
  LevelField ones{4, 1, std::vector<double>(16, 1.0)};
  CHECK(expectation(tree, ones)[0] == doctest::Approx(1.0));

  const auto dw = increments_at(tree, 4);
  CHECK(expectation(tree, dw)[0] == doctest::Approx(0.0));

  LevelField dw2{4, 1, std::vector<double>(16)};
  for (std::size_t n = 0; n < 16; ++n) {
    const double inc = tree.increment(n & 1);
    dw2.values[n] = inc * inc;
  }
  CHECK(expectation(tree, dw2)[0] == doctest::Approx(tree.dt).epsilon(1e-15));
}

TEST_CASE("jensen inequality on random fields") {
  const auto tree = build_tree(6, 1.0);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n;
  LevelField f{6, 1, std::vector<double>(64)}, f2{6, 1, std::vector<double>(64)};
  for (std::size_t i = 0; i < 64; ++i) {
    f.values[i] = n(rng);
    f2.values[i] = f.values[i] * f.values[i];
  }
  const double mean = expectation(tree, f)[0];
  CHECK(expectation(tree, f2)[0] >= mean * mean - 1e-15);
}

TEST_CASE("duality residual vanishes for zero forward data") {
  const auto grid = build_grid(8, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(3, 1.0);
  CoefficientSet coeffs;
  const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, false);

  AdaptedField y(tree, 4, grid.M);
  forward_sweep(ws, y, nullptr, nullptr);

  AdaptedField z(tree, 4, grid.M), zbar(tree, 3, grid.M), zhat(tree, 3, grid.M);
  std::mt19937_64 rng(3);
  z.level_data(3) = fields::rough_level(tree, 3, grid.M, rng).values;
  backward_sweep(ws, z, zbar, zhat, nullptr);

  CHECK(ito_duality_residual(tree, grid.quad_w, y, z, zbar, zhat, nullptr,
                             nullptr, nullptr) == doctest::Approx(0.0));
}

TEST_CASE("duality residual vanishes termwise for constant states") {
  const auto grid = build_grid(8, {0.25, 0.75}, {0.4, 0.6});
  const auto tree = build_tree(3, 1.0);
  CoefficientSet coeffs;  // pure diffusion, Neumann
  const auto ws = build_workspace(grid, tree, coeffs, CoeffForm::None, false);

  AdaptedField y(tree, 4, grid.M);
  for (std::size_t i = 0; i < grid.M; ++i) y.at(0, 0)[i] = 1.0;
  forward_sweep(ws, y, nullptr, nullptr);

  AdaptedField z(tree, 4, grid.M), zbar(tree, 3, grid.M), zhat(tree, 3, grid.M);
  for (auto& v : z.level_data(3)) v = 1.0;
  backward_sweep(ws, z, zbar, zhat, nullptr);

  for (std::size_t k = 0; k < 3; ++k)
    for (double v : zhat.level_data(k)) CHECK(std::abs(v) <= 1e-13);
  CHECK(ito_duality_residual(tree, grid.quad_w, y, z, zbar, zhat, nullptr,
                             nullptr, nullptr) <= 1e-12);
}

TEST_CASE("duality residual on random data is roundoff") {
  const auto grid = build_grid(16, {0.25, 0.5}, {0.3, 0.45});
  const auto tree = build_tree(4, 1.0);
  std::mt19937_64 rng(21);
  CoefficientSet coeffs;
  coeffs.a = 1.3;
  coeffs.a1 = -0.8;
  coeffs.a2 = 0.6;
  coeffs.B1 = 0.4;
  coeffs.B2 = -0.3;
  coeffs.beta = 0.9;
  const auto ws =
      build_workspace(grid, tree, coeffs, CoeffForm::NonDivergence, true);

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

  CHECK(ito_duality_residual(tree, grid.quad_w, y, z, zbar, zhat, &g, &q,
                             &sigma) <= 1e-10);
}
