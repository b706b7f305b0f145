#include "spcontrol/spde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace spc {

Coefficient Coefficient::table(double T, std::size_t nt, std::size_t nx,
                               std::vector<double> values) {
  if (T <= 0.0) throw ConfigInvalid("coefficient table needs T > 0");
  if (nt < 2 || nx < 2) throw ConfigInvalid("coefficient table needs nt, nx >= 2");
  if (values.size() != nt * nx)
    throw ConfigInvalid("coefficient table needs nt*nx values");
  Coefficient c;
  c.T_ = T;
  c.nt_ = nt;
  c.nx_ = nx;
  c.values_ = std::move(values);
  return c;
}

double Coefficient::operator()(double t, double x) const {
  if (values_.empty()) return constant_;
  const double ts = std::clamp(t / T_, 0.0, 1.0) * static_cast<double>(nt_ - 1);
  const double xs = std::clamp(x, 0.0, 1.0) * static_cast<double>(nx_ - 1);
  const std::size_t i = std::min(nt_ - 2, static_cast<std::size_t>(ts));
  const std::size_t j = std::min(nx_ - 2, static_cast<std::size_t>(xs));
  const double ft = ts - static_cast<double>(i);
  const double fx = xs - static_cast<double>(j);
  auto val = [&](std::size_t r, std::size_t c) { return values_[r * nx_ + c]; };
  return (1.0 - ft) * ((1.0 - fx) * val(i, j) + fx * val(i, j + 1)) +
         ft * ((1.0 - fx) * val(i + 1, j) + fx * val(i + 1, j + 1));
}

CoefficientNorms CoefficientSet::norms(const SpatialGrid& grid,
                                       const NoiseTree& tree) const {
  CoefficientNorms n;
  for (std::size_t k = 0; k <= tree.L; ++k) {
    const double t = tree.time_at(k);
    for (std::size_t i = 0; i < grid.M; ++i) {
      const double x = grid.node(i);
      n.a1 = std::max(n.a1, std::abs(a1(t, x)));
      n.a2 = std::max(n.a2, std::abs(a2(t, x)));
      n.B1 = std::max(n.B1, std::abs(B1(t, x)));
      n.B2 = std::max(n.B2, std::abs(B2(t, x)));
      n.B = std::max(n.B, std::abs(B(t, x)));
    }
    n.beta = std::max({n.beta, std::abs(beta(t, 0.0)), std::abs(beta(t, 1.0))});
  }
  return n;
}

namespace {

void sample_levels(const Coefficient& c, const SpatialGrid& grid,
                   const NoiseTree& tree, std::vector<std::vector<double>>& dst) {
  if (c.is_zero()) return;
  dst.resize(tree.L);
  for (std::size_t k = 0; k < tree.L; ++k) {
    const double t = tree.time_at(k);
    dst[k].resize(grid.M);
    for (std::size_t i = 0; i < grid.M; ++i) dst[k][i] = c(t, grid.node(i));
  }
}

double level_max_abs(const std::vector<std::vector<double>>& s) {
  double m = 0.0;
  for (const auto& lvl : s)
    for (double v : lvl) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

SchemeWorkspace build_workspace(const SpatialGrid& grid, const NoiseTree& tree,
                                const CoefficientSet& coeffs, CoeffForm form,
                                bool robin_in_operator) {
  SchemeWorkspace ws;
  ws.grid = &grid;
  ws.tree = &tree;
  ws.form = form;
  ws.robin_in_operator = robin_in_operator;
  ws.norms = coeffs.norms(grid, tree);

  const std::size_t L = tree.L;
  const std::size_t M = grid.M;
  std::vector<double> amid(M - 1);
  double amin = std::numeric_limits<double>::infinity();
  ws.op.reserve(L + 1);
  for (std::size_t k = 0; k <= L; ++k) {
    const double t = tree.time_at(k);
    for (std::size_t e = 0; e + 1 < M; ++e) {
      amid[e] = coeffs.a(t, 0.5 * (grid.node(e) + grid.node(e + 1)));
      amin = std::min(amin, amid[e]);
    }
    const double b0 = robin_in_operator ? coeffs.beta(t, 0.0) : 0.0;
    const double b1 = robin_in_operator ? coeffs.beta(t, 1.0) : 0.0;
    ws.op.push_back(assemble_operators(grid, amid, b0, b1));
  }
  if (coeffs.c0 > 0.0 && amin < coeffs.c0)
    throw EllipticityViolation("diffusion drops below the declared floor");
  ws.c0 = coeffs.c0 > 0.0 ? coeffs.c0 : amin;

  ws.step.reserve(L);
  for (std::size_t k = 1; k <= L; ++k)
    ws.step.push_back(TridiagFactor::shifted(ws.op[k].stiffness, grid.quad_w, tree.dt));

  if (form == CoeffForm::NonDivergence) {
    sample_levels(coeffs.a1, grid, tree, ws.zero_drift);
    sample_levels(coeffs.a2, grid, tree, ws.zero_noise);
    sample_levels(coeffs.B1, grid, tree, ws.first_drift);
    sample_levels(coeffs.B2, grid, tree, ws.first_noise);
  } else if (form == CoeffForm::Divergence) {
    sample_levels(coeffs.a1, grid, tree, ws.zero_drift);
    sample_levels(coeffs.a2, grid, tree, ws.zero_noise);
    sample_levels(coeffs.B, grid, tree, ws.first_drift);
  }
  const double bmax =
      std::max(level_max_abs(ws.first_drift), level_max_abs(ws.first_noise));
  ws.cfl = tree.dt * bmax / grid.h;
  return ws;
}

void forward_sweep(const SchemeWorkspace& ws, AdaptedField& y, const AdaptedField* g,
                   const AdaptedField* q) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L;
  const std::size_t M = grid.M;
  if (y.levels() != L + 1 || y.width() != M)
    throw LevelMismatch("forward_sweep: state needs L+1 levels of width M");
  if (g && (g->levels() != L || g->width() != M))
    throw LevelMismatch("forward_sweep: drift source needs L levels of width M");
  if (q && (q->levels() != L || q->width() != M))
    throw LevelMismatch("forward_sweep: noise source needs L levels of width M");

  const double dt = tree.dt;
  const std::span<const double> w(grid.quad_w);
  std::vector<double> base(M), noise(M), grad(M), flux(M), div(M), rhs(M);

  for (std::size_t k = 0; k < L; ++k) {
    const double* zd = !ws.zero_drift.empty() ? ws.zero_drift[k].data() : nullptr;
    const double* zn = !ws.zero_noise.empty() ? ws.zero_noise[k].data() : nullptr;
    const double* fd = !ws.first_drift.empty() ? ws.first_drift[k].data() : nullptr;
    const double* fn = !ws.first_noise.empty() ? ws.first_noise[k].data() : nullptr;
    const bool need_grad =
        ws.form == CoeffForm::NonDivergence && (fd != nullptr || fn != nullptr);
    const bool has_noise = zn != nullptr || fn != nullptr || q != nullptr;

    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto yk = y.at(k, n);
      if (need_grad) apply_gradient(grid, yk, grad);

      for (std::size_t i = 0; i < M; ++i) base[i] = w[i] * yk[i];
      if (ws.form == CoeffForm::NonDivergence) {
        if (zd)
          for (std::size_t i = 0; i < M; ++i) base[i] += dt * w[i] * zd[i] * yk[i];
        if (fd)
          for (std::size_t i = 0; i < M; ++i) base[i] += dt * w[i] * fd[i] * grad[i];
      } else if (ws.form == CoeffForm::Divergence) {
        if (zd)
          for (std::size_t i = 0; i < M; ++i) base[i] -= dt * w[i] * zd[i] * yk[i];
        if (fd) {
          for (std::size_t i = 0; i < M; ++i) flux[i] = w[i] * fd[i] * yk[i];
          apply_gradient_transpose(grid, flux, div);
          for (std::size_t i = 0; i < M; ++i) base[i] -= dt * div[i];
        }
      }
      if (g) {
        const auto gk = g->at(k, n);
        for (std::size_t i = 0; i < M; ++i) base[i] += dt * w[i] * gk[i];
      }

      if (has_noise) {
        std::fill(noise.begin(), noise.end(), 0.0);
        if (ws.form == CoeffForm::NonDivergence) {
          if (zn)
            for (std::size_t i = 0; i < M; ++i) noise[i] += w[i] * zn[i] * yk[i];
          if (fn)
            for (std::size_t i = 0; i < M; ++i) noise[i] += w[i] * fn[i] * grad[i];
        } else if (ws.form == CoeffForm::Divergence) {
          if (zn)
            for (std::size_t i = 0; i < M; ++i) noise[i] -= w[i] * zn[i] * yk[i];
        }
        if (q) {
          const auto qk = q->at(k, n);
          for (std::size_t i = 0; i < M; ++i) noise[i] += w[i] * qk[i];
        }
      }

      for (std::size_t c = 0; c < 2; ++c) {
        if (has_noise) {
          const double dw = tree.increment(c);
          for (std::size_t i = 0; i < M; ++i) rhs[i] = base[i] + dw * noise[i];
        } else {
          std::copy(base.begin(), base.end(), rhs.begin());
        }
        ws.step[k].solve(rhs);
        auto out = y.at(k + 1, 2 * n + c);
        std::copy(rhs.begin(), rhs.end(), out.begin());
      }
    }
  }
}

void backward_sweep(const SchemeWorkspace& ws, AdaptedField& z, AdaptedField& zbar,
                    AdaptedField& zhat, const AdaptedField* sigma) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L;
  const std::size_t M = grid.M;
  if (z.levels() != L + 1 || z.width() != M)
    throw LevelMismatch("backward_sweep: state needs L+1 levels of width M");
  if (sigma && (sigma->levels() != L || sigma->width() != M))
    throw LevelMismatch("backward_sweep: source needs L levels of width M");
  if (zbar.levels() != L || zbar.width() != M) zbar = AdaptedField(tree, L, M);
  if (zhat.levels() != L || zhat.width() != M) zhat = AdaptedField(tree, L, M);

  const double dt = tree.dt;
  const double inv2s = 1.0 / (2.0 * tree.sqrt_dt);
  const std::span<const double> w(grid.quad_w);
  std::vector<double> flux(M), div(M), grad(M);

  for (std::size_t k = L; k-- > 0;) {
    const double* zd = !ws.zero_drift.empty() ? ws.zero_drift[k].data() : nullptr;
    const double* zn = !ws.zero_noise.empty() ? ws.zero_noise[k].data() : nullptr;
    const double* fd = !ws.first_drift.empty() ? ws.first_drift[k].data() : nullptr;
    const double* fn = !ws.first_noise.empty() ? ws.first_noise[k].data() : nullptr;

    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto c0 = z.at(k + 1, 2 * n);
      const auto c1 = z.at(k + 1, 2 * n + 1);
      auto zb = zbar.at(k, n);
      auto zh = zhat.at(k, n);
      for (std::size_t i = 0; i < M; ++i) {
        zb[i] = w[i] * 0.5 * (c0[i] + c1[i]);
        zh[i] = w[i] * (c0[i] - c1[i]) * inv2s;
      }
      ws.step[k].solve(zb);
      ws.step[k].solve(zh);

      auto zk = z.at(k, n);
      std::copy(zb.begin(), zb.end(), zk.begin());
      if (ws.form == CoeffForm::NonDivergence) {
        if (zd)
          for (std::size_t i = 0; i < M; ++i) zk[i] += dt * zd[i] * zb[i];
        if (fd) {
          for (std::size_t i = 0; i < M; ++i) flux[i] = w[i] * fd[i] * zb[i];
          apply_gradient_transpose(grid, flux, div);
          for (std::size_t i = 0; i < M; ++i) zk[i] += dt * div[i] / w[i];
        }
        if (zn)
          for (std::size_t i = 0; i < M; ++i) zk[i] += dt * zn[i] * zh[i];
        if (fn) {
          for (std::size_t i = 0; i < M; ++i) flux[i] = w[i] * fn[i] * zh[i];
          apply_gradient_transpose(grid, flux, div);
          for (std::size_t i = 0; i < M; ++i) zk[i] += dt * div[i] / w[i];
        }
      } else if (ws.form == CoeffForm::Divergence) {
        if (zd)
          for (std::size_t i = 0; i < M; ++i) zk[i] -= dt * zd[i] * zb[i];
        if (fd) {
          apply_gradient(grid, zb, grad);
          for (std::size_t i = 0; i < M; ++i) zk[i] -= dt * fd[i] * grad[i];
        }
        if (zn)
          for (std::size_t i = 0; i < M; ++i) zk[i] -= dt * zn[i] * zh[i];
      }
      if (sigma) {
        const auto sg = sigma->at(k, n);
        for (std::size_t i = 0; i < M; ++i) zk[i] += dt * sg[i];
      }
    }
  }
}

void add_divergence_source(const SpatialGrid& grid, std::span<const double> F,
                           double scale, std::span<double> g) {
  const std::size_t M = grid.M;
  std::vector<double> wf(M), out(M);
  for (std::size_t i = 0; i < M; ++i) wf[i] = grid.quad_w[i] * F[i];
  apply_gradient_transpose(grid, wf, out);
  for (std::size_t i = 0; i < M; ++i) g[i] += scale * out[i] / grid.quad_w[i];
}

void add_flux_source(const SpatialGrid& grid, double f0, double f1, double scale,
                     std::span<double> g) {
  g[0] += scale * f0 / grid.quad_w[0];
  g[grid.M - 1] += scale * f1 / grid.quad_w[grid.M - 1];
}

void mask_to_g0(const SpatialGrid& grid, std::span<double> f) {
  for (std::size_t i = 0; i < grid.M; ++i)
    if (!grid.in_g0(i)) f[i] = 0.0;
}

namespace {

void check_interior_field(const std::optional<AdaptedField>& f, std::size_t L,
                          std::size_t M, const char* what) {
  if (f && (f->levels() != L || f->width() != M))
    throw LevelMismatch(std::string(what) + " needs L levels of width M");
}

void check_boundary_field(const std::optional<AdaptedField>& f, std::size_t L,
                          const char* what) {
  if (f && (f->levels() != L || f->width() != 2))
    throw LevelMismatch(std::string(what) + " needs L levels of width 2");
}

AdaptedField masked_control(const SpatialGrid& grid, const NoiseTree& tree,
                            const AdaptedField& u) {
  AdaptedField g(tree, tree.L, grid.M);
  for (std::size_t k = 0; k < tree.L; ++k)
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto uk = u.at(k, n);
      auto gk = g.at(k, n);
      for (std::size_t i = grid.g0_range.lo; i <= grid.g0_range.hi; ++i)
        gk[i] = uk[i];
    }
  return g;
}

void fill_bundle_stats(const SpatialGrid& grid, const NoiseTree& tree,
                       SolutionBundle& b) {
  const std::size_t L = tree.L;
  b.energy.resize(L + 1);
  b.trace_sq.resize(L + 1);
  for (std::size_t k = 0; k <= L; ++k) {
    b.energy[k] = expect_inner(tree, k, grid.quad_w, b.state, b.state);
    double tr = 0.0;
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto s = b.state.at(k, n);
      tr += s[0] * s[0] + s[grid.M - 1] * s[grid.M - 1];
    }
    b.trace_sq[k] = tr * tree.prob(k);
  }
}

void add_cfl_warning(const SchemeWorkspace& ws, SolutionBundle& b) {
  if (ws.cfl > 1.0)
    b.diagnostics.push_back(
        "advection step ratio dt*|B|/h exceeds 1; first-order terms are "
        "explicit, expect degraded accuracy");
}

struct DirectionSetup {
  CoeffForm form;
  bool robin;
};

DirectionSetup setup_for(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::ForwardControlled:
    case ProblemKind::AdjointBackward:
      return {CoeffForm::NonDivergence, true};
    case ProblemKind::BackwardControlled:
    case ProblemKind::AdjointForward:
      return {CoeffForm::Divergence, true};
    default:
      return {CoeffForm::None, false};
  }
}

void require_no_sources(const SourceSpec& s, const char* kind) {
  if (s.drift || s.divergence || s.noise || s.flux)
    throw ConfigInvalid(std::string(kind) + " takes no explicit sources");
}

}  // namespace

SolutionBundle solve_forward(const SpatialGrid& grid, const NoiseTree& tree,
                             const ProblemInstance& inst) {
  const std::size_t L = tree.L;
  const std::size_t M = grid.M;
  if (inst.kind != ProblemKind::ForwardControlled &&
      inst.kind != ProblemKind::AdjointForward &&
      inst.kind != ProblemKind::GeneralForward)
    throw ConfigInvalid("solve_forward: not a forward problem kind");
  if (inst.initial.size() != M)
    throw ConfigInvalid("solve_forward: initial data needs one value per node");
  check_interior_field(inst.u, L, M, "control u");
  check_interior_field(inst.v, L, M, "control v");
  check_interior_field(inst.sources.drift, L, M, "drift source");
  check_interior_field(inst.sources.divergence, L, M, "divergence source");
  check_interior_field(inst.sources.noise, L, M, "noise source");
  check_boundary_field(inst.sources.flux, L, "flux source");

  const DirectionSetup ds = setup_for(inst.kind);
  const SchemeWorkspace ws = build_workspace(grid, tree, inst.coeffs, ds.form, ds.robin);

  std::optional<AdaptedField> g;
  const AdaptedField* q = nullptr;
  if (inst.kind == ProblemKind::ForwardControlled) {
    require_no_sources(inst.sources, "ForwardControlled");
    if (inst.u) g = masked_control(grid, tree, *inst.u);
    if (inst.v) q = &*inst.v;
  } else if (inst.kind == ProblemKind::AdjointForward) {
    require_no_sources(inst.sources, "AdjointForward");
    if (inst.u || inst.v) throw ConfigInvalid("AdjointForward takes no controls");
  } else {
    if (inst.u || inst.v)
      throw ConfigInvalid("GeneralForward takes sources, not controls");
    if (inst.sources.drift || inst.sources.divergence || inst.sources.flux) {
      g.emplace(tree, L, M);
      for (std::size_t k = 0; k < L; ++k)
        for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
          auto gk = g->at(k, n);
          if (inst.sources.drift) {
            const auto f = inst.sources.drift->at(k, n);
            for (std::size_t i = 0; i < M; ++i) gk[i] += f[i];
          }
          if (inst.sources.divergence)
            add_divergence_source(grid, inst.sources.divergence->at(k, n), -1.0, gk);
          if (inst.sources.flux) {
            const auto f = inst.sources.flux->at(k, n);
            add_flux_source(grid, f[0], f[1], 1.0, gk);
          }
        }
    }
    if (inst.sources.noise) q = &*inst.sources.noise;
  }

  SolutionBundle b;
  b.state = AdaptedField(tree, L + 1, M);
  std::copy(inst.initial.begin(), inst.initial.end(), b.state.at(0, 0).begin());
  forward_sweep(ws, b.state, g ? &*g : nullptr, q);
  fill_bundle_stats(grid, tree, b);
  add_cfl_warning(ws, b);
  return b;
}

SolutionBundle solve_backward(const SpatialGrid& grid, const NoiseTree& tree,
                              const ProblemInstance& inst) {
  const std::size_t L = tree.L;
  const std::size_t M = grid.M;
  if (inst.kind != ProblemKind::BackwardControlled &&
      inst.kind != ProblemKind::AdjointBackward &&
      inst.kind != ProblemKind::GeneralBackward)
    throw ConfigInvalid("solve_backward: not a backward problem kind");
  if (inst.terminal.level != L || inst.terminal.width != M ||
      inst.terminal.values.size() != tree.nodes_at(L) * M)
    throw ConfigInvalid("solve_backward: terminal data must fill level L");
  if (inst.v) throw ConfigInvalid("backward problems have no noise control");
  check_interior_field(inst.u, L, M, "control u");
  check_interior_field(inst.sources.drift, L, M, "drift source");
  check_interior_field(inst.sources.divergence, L, M, "divergence source");
  check_boundary_field(inst.sources.flux, L, "flux source");
  if (inst.sources.noise)
    throw ConfigInvalid("backward problems have no noise source; the martingale "
                        "part is an unknown");

  const DirectionSetup ds = setup_for(inst.kind);
  const SchemeWorkspace ws = build_workspace(grid, tree, inst.coeffs, ds.form, ds.robin);

  std::optional<AdaptedField> sigma;
  if (inst.kind == ProblemKind::AdjointBackward) {
    require_no_sources(inst.sources, "AdjointBackward");
    if (inst.u) throw ConfigInvalid("AdjointBackward takes no controls");
  } else if (inst.kind == ProblemKind::BackwardControlled) {
    require_no_sources(inst.sources, "BackwardControlled");
    if (inst.u) {
      sigma = masked_control(grid, tree, *inst.u);
      for (std::size_t k = 0; k < L; ++k)
        for (double& s : sigma->level_data(k)) s = -s;
    }
  } else {
    if (inst.u) throw ConfigInvalid("GeneralBackward takes sources, not controls");
    if (inst.sources.drift || inst.sources.divergence || inst.sources.flux) {
      sigma.emplace(tree, L, M);
      for (std::size_t k = 0; k < L; ++k)
        for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
          auto sk = sigma->at(k, n);
          if (inst.sources.drift) {
            const auto f = inst.sources.drift->at(k, n);
            for (std::size_t i = 0; i < M; ++i) sk[i] -= f[i];
          }
          if (inst.sources.divergence)
            add_divergence_source(grid, inst.sources.divergence->at(k, n), 1.0, sk);
          if (inst.sources.flux) {
            const auto f = inst.sources.flux->at(k, n);
            add_flux_source(grid, f[0], f[1], 1.0, sk);
          }
        }
    }
  }

  SolutionBundle b;
  b.state = AdaptedField(tree, L + 1, M);
  std::copy(inst.terminal.values.begin(), inst.terminal.values.end(),
            b.state.level_data(L).begin());
  backward_sweep(ws, b.state, b.mean_half, b.mart_half, sigma ? &*sigma : nullptr);
  fill_bundle_stats(grid, tree, b);
  add_cfl_warning(ws, b);
  return b;
}

namespace {

/// Smallest C >= 0 with e^{C r2 T} tail + C noise >= head, +inf if the head
/// is not reachable below the cap.
double fit_gronwall(double head, double tail, double noise, double r2, double T) {
  auto excess = [&](double C) {
    const double e = std::exp(std::min(C * r2 * T, 700.0));
    return e * tail + C * noise - head;
  };
  if (excess(0.0) >= 0.0) return 0.0;
  double hi = 1.0;
  while (excess(hi) < 0.0) {
    hi *= 2.0;
    if (hi > 1e8) return std::numeric_limits<double>::infinity();
  }
  double lo = hi * 0.5;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (excess(mid) < 0.0 ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace

EnergyReport energy_estimate(const SchemeWorkspace& ws, const SolutionBundle& b,
                             const AdaptedField* sigma, bool backward) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L;
  const std::size_t M = grid.M;
  const double dt = tree.dt;
  const std::span<const double> w(grid.quad_w);

  EnergyReport r;
  r.energy.resize(L + 1);
  for (std::size_t k = 0; k <= L; ++k)
    r.energy[k] = expect_inner(tree, k, grid.quad_w, b.state, b.state);

  if (backward) {
    r.r2 = lambda_threshold_backward(ws.norms, tree.T, 1.0).r2;
    r.dissipation.assign(L, 0.0);
    r.trace_part.assign(L, 0.0);
    r.mart_energy.assign(L, 0.0);
    r.coupling.assign(L, 0.0);
    r.source_term.assign(L, 0.0);
    r.second_order.assign(L, 0.0);

    std::vector<double> sz(M), p(M), flux(M), div(M), grad(M);
    double mart_sum = 0.0;
    for (std::size_t k = 0; k < L; ++k) {
      const double pk = tree.prob(k);
      const double* zd = !ws.zero_drift.empty() ? ws.zero_drift[k].data() : nullptr;
      const double* zn = !ws.zero_noise.empty() ? ws.zero_noise[k].data() : nullptr;
      const double* fd = !ws.first_drift.empty() ? ws.first_drift[k].data() : nullptr;
      const double* fn = !ws.first_noise.empty() ? ws.first_noise[k].data() : nullptr;
      const RobinAssembly& op = ws.op[k + 1];
      for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
        const auto zb = b.mean_half.at(k, n);
        const auto zh = b.mart_half.at(k, n);
        const auto c0 = b.state.at(k + 1, 2 * n);
        const auto c1 = b.state.at(k + 1, 2 * n + 1);

        std::fill(sz.begin(), sz.end(), 0.0);
        op.stiffness.apply_add(zb, 1.0, sz);
        r.dissipation[k] += pk * 2.0 * dt * dot(sz, zb);
        r.trace_part[k] += pk * 2.0 * dt *
                           (op.beta0 * zb[0] * zb[0] + op.beta1 * zb[M - 1] * zb[M - 1]);
        double so = 0.0;
        for (std::size_t i = 0; i < M; ++i) so += dt * dt * sz[i] * sz[i] / w[i];

        double me = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
          const double m = (c0[i] - c1[i]) / (2.0 * tree.sqrt_dt);
          me += w[i] * m * m;
        }
        r.mart_energy[k] += pk * dt * me;

        // p = M^{-1}(La^T zbar + N^T Zhat) + sigma, the correction the
        // backward step adds on top of zbar.
        std::fill(p.begin(), p.end(), 0.0);
        if (ws.form == CoeffForm::NonDivergence) {
          if (zd)
            for (std::size_t i = 0; i < M; ++i) p[i] += zd[i] * zb[i];
          if (fd) {
            for (std::size_t i = 0; i < M; ++i) flux[i] = w[i] * fd[i] * zb[i];
            apply_gradient_transpose(grid, flux, div);
            for (std::size_t i = 0; i < M; ++i) p[i] += div[i] / w[i];
          }
          if (zn)
            for (std::size_t i = 0; i < M; ++i) p[i] += zn[i] * zh[i];
          if (fn) {
            for (std::size_t i = 0; i < M; ++i) flux[i] = w[i] * fn[i] * zh[i];
            apply_gradient_transpose(grid, flux, div);
            for (std::size_t i = 0; i < M; ++i) p[i] += div[i] / w[i];
          }
        } else if (ws.form == CoeffForm::Divergence) {
          if (zd)
            for (std::size_t i = 0; i < M; ++i) p[i] -= zd[i] * zb[i];
          if (fd) {
            apply_gradient(grid, zb, grad);
            for (std::size_t i = 0; i < M; ++i) p[i] -= fd[i] * grad[i];
          }
          if (zn)
            for (std::size_t i = 0; i < M; ++i) p[i] -= zn[i] * zh[i];
        }
        r.coupling[k] += pk * (-2.0) * dt * dot_weighted(w, zb, p);
        if (sigma) {
          const auto sg = sigma->at(k, n);
          r.source_term[k] += pk * (-2.0) * dt * dot_weighted(w, zb, sg);
          for (std::size_t i = 0; i < M; ++i) p[i] += sg[i];
        }
        for (std::size_t i = 0; i < M; ++i) so -= dt * dt * w[i] * p[i] * p[i];
        r.second_order[k] += pk * so;
      }
      mart_sum += dt * expect_inner(tree, k, grid.quad_w, b.mart_half, b.mart_half);
    }

    double worst = 0.0;
    for (std::size_t k = 0; k < L; ++k) {
      const double lhs = r.energy[k + 1] - r.energy[k];
      const double rhs = r.dissipation[k] + r.mart_energy[k] + r.coupling[k] +
                         r.source_term[k] + r.second_order[k];
      const double scale = std::max({std::abs(r.energy[k + 1]), std::abs(r.energy[k]),
                                     std::abs(rhs), 1e-300});
      worst = std::max(worst, std::abs(lhs - rhs) / scale);
    }
    r.identity_residual = worst;
    r.noise_factor = ws.norms.B2 * ws.norms.B2 * mart_sum;

    double fit = 0.0;
    for (std::size_t k = 1; k <= L; ++k)
      fit = std::max(fit, fit_gronwall(r.energy[0], r.energy[k], r.noise_factor,
                                       r.r2, tree.T));
    r.fitted_C = fit;
  } else {
    r.r2 = lambda_threshold_forward(ws.norms, tree.T, 1.0).r2;
    double fit = 0.0;
    for (std::size_t k = 0; k < L; ++k)
      fit = std::max(fit, fit_gronwall(r.energy[L], r.energy[k], 0.0, r.r2, tree.T));
    r.fitted_C = fit;
  }
  return r;
}

}  // namespace spc
