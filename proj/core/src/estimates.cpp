#include "spcontrol/estimates.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

#include "spcontrol/errors.hpp"
#include "spcontrol/grid.hpp"

namespace spc {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Streaming log-sum-exp; exact for the running maximum, never overflows.
struct LogAccum {
  double m = -kInf;
  double s = 0.0;
  void add(double l) {
    if (!(l > -kInf)) return;
    if (l <= m) {
      s += std::exp(l - m);
      return;
    }
    s = s * std::exp(m - l) + 1.0;
    m = l;
  }
  double value() const { return s > 0.0 ? m + std::log(s) : -kInf; }
};

std::string format2(const char* fmt, double a, double b) {
  char buf[192];
  std::snprintf(buf, sizeof buf, fmt, a, b);
  return buf;
}

/// Samples of the weight pair at the interior node times, row r = level r+1.
struct WeightTable {
  std::vector<std::vector<double>> alpha2;   // 2 alpha(t_k, x_i)
  std::vector<std::vector<double>> log_phi;  // log phi(t_k, x_i)
};

WeightTable sample_weights(const WeightFamily& wf, const SpatialGrid& grid,
                           const NoiseTree& tree) {
  WeightTable t;
  t.alpha2.resize(tree.L - 1);
  t.log_phi.resize(tree.L - 1);
  for (std::size_t k = 1; k < tree.L; ++k) {
    auto& a = t.alpha2[k - 1];
    auto& p = t.log_phi[k - 1];
    a.resize(grid.M);
    p.resize(grid.M);
    const double tk = tree.time_at(k);
    for (std::size_t i = 0; i < grid.M; ++i) {
      const auto w = wf.eval(tk, grid.node(i));
      a[i] = 2.0 * w.alpha;
      p[i] = w.log_phi;
    }
  }
  return t;
}

// data[k-1][i]: fully weighted squared samples at (t_k, x_i). Boundary
// terms use the same layout with zeros away from the two endpoint columns.
using Table = std::vector<std::vector<double>>;

Table zero_table(std::size_t L, std::size_t M) {
  return Table(L - 1, std::vector<double>(M, 0.0));
}

/// dt w_i E f(k,.,i)^2 per interior level; `mask` zeroes nodes outside it.
Table interior_table(const SpatialGrid& grid, const NoiseTree& tree,
                     const AdaptedField& f, const IndexRange* mask) {
  Table out = zero_table(tree.L, grid.M);
  for (std::size_t k = 1; k < tree.L; ++k) {
    const double pw = tree.dt * tree.prob(k);
    auto& row = out[k - 1];
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto v = f.at(k, n);
      for (std::size_t i = 0; i < grid.M; ++i) row[i] += pw * v[i] * v[i];
    }
    for (std::size_t i = 0; i < grid.M; ++i)
      row[i] *= (mask && !mask->contains(i)) ? 0.0 : grid.quad_w[i];
  }
  return out;
}

Table gradient_table(const SpatialGrid& grid, const NoiseTree& tree,
                     const AdaptedField& z) {
  Table out = zero_table(tree.L, grid.M);
  std::vector<double> g(grid.M);
  for (std::size_t k = 1; k < tree.L; ++k) {
    const double pw = tree.dt * tree.prob(k);
    auto& row = out[k - 1];
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      apply_gradient(grid, z.at(k, n), g);
      for (std::size_t i = 0; i < grid.M; ++i) row[i] += pw * g[i] * g[i];
    }
    for (std::size_t i = 0; i < grid.M; ++i) row[i] *= grid.quad_w[i];
  }
  return out;
}

/// dt E z(k,.,x)^2 at the two endpoints (counting measure, no mass weight).
Table trace_table(const SpatialGrid& grid, const NoiseTree& tree,
                  const AdaptedField& z) {
  Table out = zero_table(tree.L, grid.M);
  const std::size_t last = grid.M - 1;
  for (std::size_t k = 1; k < tree.L; ++k) {
    const double pw = tree.dt * tree.prob(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto v = z.at(k, n);
      out[k - 1][0] += pw * v[0] * v[0];
      out[k - 1][last] += pw * v[last] * v[last];
    }
  }
  return out;
}

/// Same for a width-2 boundary field.
Table flux_table(const SpatialGrid& grid, const NoiseTree& tree,
                 const AdaptedField& f) {
  Table out = zero_table(tree.L, grid.M);
  const std::size_t last = grid.M - 1;
  for (std::size_t k = 1; k < tree.L; ++k) {
    const double pw = tree.dt * tree.prob(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto v = f.at(k, n);
      out[k - 1][0] += pw * v[0] * v[0];
      out[k - 1][last] += pw * v[1] * v[1];
    }
  }
  return out;
}

/// Per-lambda log of lam^lam_pow sum_{k,i} data theta^2 phi^phi_pow.
std::vector<double> log_terms(const WeightTable& wt, const Table& data,
                              std::span<const double> lambdas, double phi_pow,
                              double lam_pow) {
  std::vector<double> out(lambdas.size(), -kInf);
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    LogAccum acc;
    for (std::size_t r = 0; r < data.size(); ++r) {
      const auto& row = data[r];
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (row[i] <= 0.0) continue;
        acc.add(std::log(row[i]) + phi_pow * wt.log_phi[r][i] +
                lambdas[j] * wt.alpha2[r][i]);
      }
    }
    const double v = acc.value();
    if (v > -kInf) out[j] = lam_pow * std::log(lambdas[j]) + v;
  }
  return out;
}

void check_source(const std::optional<AdaptedField>& f, std::size_t L,
                  std::size_t width, const char* name) {
  if (!f) return;
  if (f->levels() < L || f->width() != width)
    throw ConfigInvalid(std::string("carleman sources: ") + name +
                        " does not match the tree levels and field width");
}

CarlemanReport eval_common(const SchemeWorkspace& ws, const SolutionBundle& b,
                           const SourceSpec& src, const WeightFamily& wf,
                           std::span<const double> lambdas, bool backward) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L;
  if (L < 2)
    throw ConfigInvalid("carleman evaluation needs at least two time steps");
  if (lambdas.empty())
    throw ConfigInvalid("carleman evaluation needs a nonempty lambda grid");
  for (double l : lambdas)
    if (!(l > 0.0)) throw ConfigInvalid("carleman lambda values must be positive");
  if (std::abs(wf.T - tree.T) > 1e-12 * std::max(1.0, tree.T))
    throw ConfigInvalid("weight family horizon differs from the tree horizon");
  if (b.state.levels() != L + 1 || b.state.width() != grid.M)
    throw ConfigInvalid("carleman evaluation needs the full state trajectory");
  if (backward && (b.mart_half.levels() != L || b.mart_half.width() != grid.M))
    throw ConfigInvalid(
        "backward carleman evaluation needs the martingale part of the state");
  check_source(src.drift, L, grid.M, "drift");
  check_source(src.divergence, L, grid.M, "divergence");
  check_source(src.flux, L, 2, "flux");
  if (!backward) check_source(src.noise, L, grid.M, "noise");

  const WeightTable wt = sample_weights(wf, grid, tree);

  CarlemanReport r;
  r.lambda_grid.assign(lambdas.begin(), lambdas.end());
  r.threshold = backward ? lambda_threshold_backward(ws.norms, tree.T, 1.0)
                         : lambda_threshold_forward(ws.norms, tree.T, 1.0);

  const Table ez = interior_table(grid, tree, b.state, nullptr);
  const Table egrad = gradient_table(grid, tree, b.state);
  const Table etrace = trace_table(grid, tree, b.state);
  const Table elocal = interior_table(grid, tree, b.state, &grid.g0_range);
  const Table empty = zero_table(L, grid.M);
  const Table edrift =
      src.drift ? interior_table(grid, tree, *src.drift, nullptr) : empty;
  const Table ediv =
      src.divergence ? interior_table(grid, tree, *src.divergence, nullptr) : empty;
  const Table eflux = src.flux ? flux_table(grid, tree, *src.flux) : empty;
  Table enoise = empty;
  if (backward)
    enoise = interior_table(grid, tree, b.mart_half, nullptr);
  else if (src.noise)
    enoise = interior_table(grid, tree, *src.noise, nullptr);

  r.log_lhs_interior = log_terms(wt, ez, lambdas, 3.0, 3.0);
  r.log_lhs_grad = log_terms(wt, egrad, lambdas, 1.0, 1.0);
  r.log_lhs_trace = log_terms(wt, etrace, lambdas, 2.0, 2.0);
  r.log_rhs_local = log_terms(wt, elocal, lambdas, 3.0, 3.0);
  r.log_rhs_drift = log_terms(wt, edrift, lambdas, 0.0, 0.0);
  r.log_rhs_boundary = log_terms(wt, eflux, lambdas, 1.0, 1.0);
  r.log_rhs_div = log_terms(wt, ediv, lambdas, 2.0, 2.0);
  r.log_rhs_noise = log_terms(wt, enoise, lambdas, 2.0, 2.0);
  r.log_noise_phi3 = backward ? log_terms(wt, enoise, lambdas, 3.0, 3.0)
                              : std::vector<double>(lambdas.size(), -kInf);

  r.log_lhs.resize(lambdas.size());
  r.log_rhs.resize(lambdas.size());
  r.ratio.resize(lambdas.size());
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    const double lhs3[] = {r.log_lhs_interior[j], r.log_lhs_grad[j],
                           r.log_lhs_trace[j]};
    const double rhs5[] = {r.log_rhs_local[j], r.log_rhs_drift[j],
                           r.log_rhs_boundary[j], r.log_rhs_div[j],
                           r.log_rhs_noise[j]};
    r.log_lhs[j] = log_sum_exp(lhs3);
    r.log_rhs[j] = log_sum_exp(rhs5);
    r.ratio[j] = r.log_lhs[j] > -kInf ? std::exp(r.log_lhs[j] - r.log_rhs[j]) : 0.0;
    if (lambdas[j] < r.threshold.value)
      r.diagnostics.push_back(format2(
          "lambda %.6g is below the admissible threshold %.6g; the bound is not guaranteed",
          lambdas[j], r.threshold.value));
  }
  return r;
}

/// Trapezoid-in-t G0 energy of a state field, levels 0..L.
double observed_energy_g0(const SpatialGrid& grid, const NoiseTree& tree,
                          const AdaptedField& z) {
  double den = 0.0;
  for (std::size_t k = 0; k <= tree.L; ++k) {
    const double wk = (k == 0 || k == tree.L) ? 0.5 * tree.dt : tree.dt;
    double e = 0.0;
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n)
      e += grid.inner_g0(z.at(k, n), z.at(k, n));
    den += wk * tree.prob(k) * e;
  }
  return den;
}

void finish_stats(ObservabilityReport& rep) {
  std::vector<double> sorted = rep.ratios;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  rep.min_ratio = sorted.front();
  rep.max_ratio = sorted.back();
  rep.median_ratio =
      (n % 2) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  rep.fitted_c = (rep.max_ratio > 0.0 && rep.exponent > 0.0)
                     ? std::log(rep.max_ratio) / rep.exponent
                     : 0.0;
}

double guarded_ratio(double num, double den, std::size_t sample,
                     std::vector<std::string>& diagnostics) {
  if (den > 0.0) return num / den;
  if (num > 0.0) {
    diagnostics.push_back("sample " + std::to_string(sample) +
                          " has endpoint energy but no observed energy");
    return kInf;
  }
  diagnostics.push_back("sample " + std::to_string(sample) +
                        " is identically zero");
  return 0.0;
}

}  // namespace

double log_sum_exp(std::span<const double> v) {
  LogAccum acc;
  for (double x : v) acc.add(x);
  return acc.value();
}

CarlemanReport carleman_eval_backward(const SchemeWorkspace& ws,
                                      const SolutionBundle& bundle,
                                      const SourceSpec& sources,
                                      const WeightFamily& wf,
                                      std::span<const double> lambda_grid) {
  return eval_common(ws, bundle, sources, wf, lambda_grid, true);
}

CarlemanReport carleman_eval_forward(const SchemeWorkspace& ws,
                                     const SolutionBundle& bundle,
                                     const SourceSpec& sources,
                                     const WeightFamily& wf,
                                     std::span<const double> lambda_grid) {
  return eval_common(ws, bundle, sources, wf, lambda_grid, false);
}

SourceSpec substitution_backward(const SpatialGrid& grid, const NoiseTree& tree,
                                 const CoefficientSet& coeffs,
                                 const AdaptedField& z, const AdaptedField& zhat) {
  if (z.levels() < tree.L || z.width() != grid.M)
    throw ConfigInvalid("substitution needs the state on levels 0..L-1");
  if (zhat.levels() < tree.L || zhat.width() != grid.M)
    throw ConfigInvalid("substitution needs the martingale part on levels 0..L-1");
  SourceSpec s;
  s.drift.emplace(tree, tree.L, grid.M);
  s.divergence.emplace(tree, tree.L, grid.M);
  s.flux.emplace(tree, tree.L, std::size_t{2});
  for (std::size_t k = 0; k < tree.L; ++k) {
    const double t = tree.time_at(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto zv = z.at(k, n);
      const auto hv = zhat.at(k, n);
      auto f1 = s.drift->at(k, n);
      auto fd = s.divergence->at(k, n);
      for (std::size_t i = 0; i < grid.M; ++i) {
        const double x = grid.node(i);
        f1[i] = -(coeffs.a1(t, x) * zv[i] + coeffs.a2(t, x) * hv[i]);
        fd[i] = coeffs.B1(t, x) * zv[i] + coeffs.B2(t, x) * hv[i];
      }
      auto fl = s.flux->at(k, n);
      fl[0] = -coeffs.beta(t, 0.0) * zv[0];
      fl[1] = -coeffs.beta(t, 1.0) * zv[grid.M - 1];
    }
  }
  return s;
}

SourceSpec substitution_forward(const SpatialGrid& grid, const NoiseTree& tree,
                                const CoefficientSet& coeffs,
                                const AdaptedField& z) {
  if (z.levels() < tree.L || z.width() != grid.M)
    throw ConfigInvalid("substitution needs the state on levels 0..L-1");
  SourceSpec s;
  s.drift.emplace(tree, tree.L, grid.M);
  s.noise.emplace(tree, tree.L, grid.M);
  s.divergence.emplace(tree, tree.L, grid.M);
  s.flux.emplace(tree, tree.L, std::size_t{2});
  for (std::size_t k = 0; k < tree.L; ++k) {
    const double t = tree.time_at(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto zv = z.at(k, n);
      auto f1 = s.drift->at(k, n);
      auto fn = s.noise->at(k, n);
      auto fd = s.divergence->at(k, n);
      for (std::size_t i = 0; i < grid.M; ++i) {
        const double x = grid.node(i);
        f1[i] = -coeffs.a1(t, x) * zv[i];
        fn[i] = -coeffs.a2(t, x) * zv[i];
        fd[i] = coeffs.B(t, x) * zv[i];
      }
      auto fl = s.flux->at(k, n);
      fl[0] = -coeffs.beta(t, 0.0) * zv[0];
      fl[1] = -coeffs.beta(t, 1.0) * zv[grid.M - 1];
    }
  }
  return s;
}

std::vector<AbsorptionCheck> absorption_checks(const CarlemanReport& report,
                                               std::size_t lambda_index,
                                               bool backward) {
  if (lambda_index >= report.lambda_grid.size())
    throw ConfigInvalid("absorption check index outside the lambda grid");
  const std::size_t j = lambda_index;
  const double log_quarter = std::log(0.25);
  const double log_half = std::log(0.5);
  std::vector<AbsorptionCheck> out;
  if (backward) {
    const double budget_terms[] = {report.log_lhs_interior[j] + log_quarter,
                                   report.log_noise_phi3[j]};
    const double budget = log_sum_exp(budget_terms);
    out.push_back({"zero-order term into the interior and noise energy",
                   report.log_rhs_drift[j], budget});
    out.push_back({"boundary term into the trace energy",
                   report.log_rhs_boundary[j], report.log_lhs_trace[j] + log_half});
    out.push_back({"first-order term into the interior and noise energy",
                   report.log_rhs_div[j], budget});
  } else {
    const double interior_terms[] = {report.log_rhs_drift[j],
                                     report.log_rhs_noise[j],
                                     report.log_rhs_div[j]};
    out.push_back({"interior terms into half the interior energy",
                   log_sum_exp(interior_terms),
                   report.log_lhs_interior[j] + log_half});
    out.push_back({"boundary term into the trace energy",
                   report.log_rhs_boundary[j], report.log_lhs_trace[j] + log_half});
  }
  return out;
}

ObservabilityReport observability_forward(
    const SchemeWorkspace& ws, const std::vector<LevelField>& terminal_data) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L;
  if (terminal_data.size() < 10)
    throw ConfigInvalid("observability needs an ensemble of at least 10 samples");
  ObservabilityReport rep;
  rep.samples = terminal_data.size();
  rep.exponent = cost_exponent_forward(ws.norms, tree.T);
  for (std::size_t s = 0; s < terminal_data.size(); ++s) {
    const LevelField& d = terminal_data[s];
    if (d.width != grid.M || d.values.size() != tree.nodes_at(L) * grid.M)
      throw LevelMismatch("observability terminal data must cover the leaf level");
    AdaptedField z(tree, L + 1, grid.M);
    AdaptedField zbar(tree, L, grid.M), zhat(tree, L, grid.M);
    z.level_data(L) = d.values;
    backward_sweep(ws, z, zbar, zhat, nullptr);
    const double num = grid.inner(z.at(0, 0), z.at(0, 0));
    double den = observed_energy_g0(grid, tree, z);
    for (std::size_t k = 0; k < L; ++k) {
      double e = 0.0;
      for (std::size_t n = 0; n < tree.nodes_at(k); ++n)
        e += grid.inner(zhat.at(k, n), zhat.at(k, n));
      den += tree.dt * tree.prob(k) * e;
    }
    rep.ratios.push_back(guarded_ratio(num, den, s, rep.diagnostics));
  }
  finish_stats(rep);
  return rep;
}

ObservabilityReport observability_backward(
    const SchemeWorkspace& ws, const std::vector<std::vector<double>>& initial_data) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L;
  if (initial_data.size() < 10)
    throw ConfigInvalid("observability needs an ensemble of at least 10 samples");
  ObservabilityReport rep;
  rep.samples = initial_data.size();
  rep.exponent = cost_exponent_backward(ws.norms, tree.T);
  for (std::size_t s = 0; s < initial_data.size(); ++s) {
    if (initial_data[s].size() != grid.M)
      throw LevelMismatch("observability initial data needs one value per grid node");
    AdaptedField z(tree, L + 1, grid.M);
    z.level_data(0) = initial_data[s];
    forward_sweep(ws, z, nullptr, nullptr);
    double num = 0.0;
    for (std::size_t n = 0; n < tree.nodes_at(L); ++n)
      num += grid.inner(z.at(L, n), z.at(L, n));
    num *= tree.prob(L);
    const double den = observed_energy_g0(grid, tree, z);
    rep.ratios.push_back(guarded_ratio(num, den, s, rep.diagnostics));
  }
  finish_stats(rep);
  return rep;
}

double time_window_energy(const SpatialGrid& grid, const NoiseTree& tree,
                          const AdaptedField& z, double t_lo, double t_hi) {
  if (!(t_lo < t_hi))
    throw ConfigInvalid("time window must have positive length");
  const double tol = 1e-12 * std::max(1.0, tree.T);
  double sum = 0.0;
  for (std::size_t k = 0; k < z.levels(); ++k) {
    const double t = tree.time_at(k);
    if (t < t_lo - tol || t > t_hi + tol) continue;
    double wk = tree.dt;
    if (std::abs(t - t_lo) <= tol || std::abs(t - t_hi) <= tol) wk *= 0.5;
    double e = 0.0;
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n)
      e += grid.inner(z.at(k, n), z.at(k, n));
    sum += wk * tree.prob(k) * e;
  }
  return sum;
}

double log_weight_floor(const WeightFamily& wf, const SpatialGrid& grid,
                        double lambda, double t) {
  double best = kInf;
  for (std::size_t i = 0; i < grid.M; ++i) {
    const auto p = wf.eval(t, grid.node(i));
    best = std::min(best, 2.0 * lambda * p.alpha + 3.0 * p.log_phi);
  }
  return best;
}

double log_weight_peak(const WeightFamily& wf, const SpatialGrid& grid,
                       double lambda, double t) {
  double best = -kInf;
  for (std::size_t i = 0; i < grid.M; ++i) {
    const auto p = wf.eval(t, grid.node(i));
    best = std::max(best, 2.0 * lambda * p.alpha + 3.0 * p.log_phi);
  }
  return best;
}

CarlemanBatch aggregate_reports(const std::vector<CarlemanReport>& reports) {
  if (reports.empty())
    throw ConfigInvalid("aggregate needs at least one carleman report");
  const auto& grid = reports.front().lambda_grid;
  for (const auto& r : reports)
    if (r.lambda_grid != grid)
      throw ConfigInvalid("aggregate needs reports on a shared lambda grid");
  CarlemanBatch batch;
  batch.lambda_grid = grid;
  batch.log_lhs.resize(grid.size());
  batch.log_rhs.resize(grid.size());
  batch.ratio.resize(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) {
    LogAccum lhs, rhs;
    for (const auto& r : reports) {
      lhs.add(r.log_lhs[j]);
      rhs.add(r.log_rhs[j]);
    }
    batch.log_lhs[j] = lhs.value();
    batch.log_rhs[j] = rhs.value();
    batch.ratio[j] = batch.log_lhs[j] > -kInf
                         ? std::exp(batch.log_lhs[j] - batch.log_rhs[j])
                         : 0.0;
  }
  std::vector<double> sorted = batch.ratio;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  batch.ratio_min = sorted.front();
  batch.ratio_max = sorted.back();
  batch.ratio_median =
      (n % 2) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  if (batch.ratio_min > 0.0)
    batch.spread = batch.ratio_max / batch.ratio_min;
  else
    batch.spread = batch.ratio_max > 0.0 ? kInf : 1.0;
  return batch;
}

}  // namespace spc
