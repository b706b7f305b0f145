#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "spcontrol/estimates.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/hum.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"
#include "spcontrol/weights.hpp"

using namespace spc;

namespace {

CoefficientSet mixed_coeffs() {
  CoefficientSet c;
  c.a1 = 0.5;
  c.a2 = 0.4;
  c.B1 = 0.2;
  c.B2 = 0.15;
  c.beta = 0.5;
  return c;
}

struct Setup {
  SpatialGrid grid;
  NoiseTree tree;
  SchemeWorkspace ws;

  Setup(std::size_t M, std::size_t L)
      : grid(build_grid(M, {0.25, 0.5}, {0.3, 0.45})),
        tree(build_tree(L, 1.0)),
        ws(build_workspace(grid, tree, mixed_coeffs(), CoeffForm::NonDivergence,
                           true)) {}
};

void bench_forward_sweep(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)),
                static_cast<std::size_t>(state.range(1)));
  std::mt19937_64 rng(1);
  const auto y0 = fields::smooth_profile(s.grid.M, rng);
  for (auto _ : state) {
    AdaptedField y(s.tree, s.tree.L + 1, s.grid.M);
    std::copy(y0.begin(), y0.end(), y.at(0, 0).begin());
    forward_sweep(s.ws, y, nullptr, nullptr);
    benchmark::DoNotOptimize(y.level_data(s.tree.L).data());
  }
}
BENCHMARK(bench_forward_sweep)->Args({64, 8})->Args({64, 12})->Args({256, 10});

void bench_backward_sweep(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)),
                static_cast<std::size_t>(state.range(1)));
  std::mt19937_64 rng(2);
  const auto leaf = fields::rough_level(s.tree, s.tree.L, s.grid.M, rng);
  for (auto _ : state) {
    AdaptedField z(s.tree, s.tree.L + 1, s.grid.M);
    AdaptedField zbar(s.tree, s.tree.L, s.grid.M);
    AdaptedField zhat(s.tree, s.tree.L, s.grid.M);
    z.level_data(s.tree.L) = leaf.values;
    backward_sweep(s.ws, z, zbar, zhat, nullptr);
    benchmark::DoNotOptimize(z.level_data(0).data());
  }
}
BENCHMARK(bench_backward_sweep)->Args({64, 8})->Args({64, 12})->Args({256, 10});

void bench_gramian_apply(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)),
                static_cast<std::size_t>(state.range(1)));
  std::mt19937_64 rng(3);
  const auto a = fields::rough_level(s.tree, s.tree.L, s.grid.M, rng);
  for (auto _ : state) {
    auto out = gramian_apply_forward(s.ws, a);
    benchmark::DoNotOptimize(out.values.data());
  }
}
BENCHMARK(bench_gramian_apply)->Args({64, 8})->Args({64, 10});

void bench_hum_solve(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)),
                static_cast<std::size_t>(state.range(1)));
  std::mt19937_64 rng(4);
  const auto y0 = fields::smooth_profile(s.grid.M, rng);
  HumConfig cfg;
  cfg.epsilon = 1e-2;
  cfg.cg_max_iters = 2000;
  for (auto _ : state) {
    auto r = solve_hum_forward(s.ws, y0, cfg);
    benchmark::DoNotOptimize(r.terminal_sq);
  }
}
BENCHMARK(bench_hum_solve)->Args({32, 6})->Args({64, 8})->Unit(benchmark::kMillisecond);

void bench_carleman_eval(benchmark::State& state) {
  const Setup s(static_cast<std::size_t>(state.range(0)),
                static_cast<std::size_t>(state.range(1)));
  const auto wf = make_weights(build_psi(s.grid, 3.0, 5.0), 1.0, s.tree.T);
  std::mt19937_64 rng(5);
  SolutionBundle b;
  b.state = AdaptedField(s.tree, s.tree.L + 1, s.grid.M);
  b.mean_half = AdaptedField(s.tree, s.tree.L, s.grid.M);
  b.mart_half = AdaptedField(s.tree, s.tree.L, s.grid.M);
  b.state.level_data(s.tree.L) =
      fields::rough_level(s.tree, s.tree.L, s.grid.M, rng).values;
  backward_sweep(s.ws, b.state, b.mean_half, b.mart_half, nullptr);
  const auto src = substitution_backward(s.grid, s.tree, mixed_coeffs(), b.state,
                                         b.mart_half);
  const double thr = lambda_threshold_backward(s.ws.norms, s.tree.T, 1.0).value;
  const std::vector<double> lams{thr, 2.0 * thr, 4.0 * thr};
  for (auto _ : state) {
    auto rep = carleman_eval_backward(s.ws, b, src, wf, lams);
    benchmark::DoNotOptimize(rep.ratio.data());
  }
}
BENCHMARK(bench_carleman_eval)->Args({64, 8})->Args({64, 10})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
