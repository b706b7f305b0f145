#include "spcontrol/kkt_oracle.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "spcontrol/errors.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/linalg.hpp"
#include "weighted_kernel.hpp"

namespace spc {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd dense_tridiag(const TridiagSym& t) {
  const std::size_t n = t.size();
  MatrixXd m = MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = t.diag[i];
    if (i + 1 < n) {
      m(i, i + 1) = t.off[i];
      m(i + 1, i) = t.off[i];
    }
  }
  return m;
}

MatrixXd dense_grad(const SpatialGrid& grid) {
  const std::size_t M = grid.M;
  MatrixXd G(M, M);
  std::vector<double> e(M, 0.0), out(M);
  for (std::size_t j = 0; j < M; ++j) {
    e[j] = 1.0;
    apply_gradient(grid, e, out);
    for (std::size_t i = 0; i < M; ++i) G(i, j) = out[i];
    e[j] = 0.0;
  }
  return G;
}

/// Dense copies of the per-step operators used by the sweeps: J[k] advances
/// level k to k+1 implicitly, Lam/Nz are the explicit drift and noise
/// operators at level k (zero when the workspace has no such coefficients).
struct DenseOps {
  std::size_t L = 0, M = 0;
  MatrixXd Mw;
  std::vector<MatrixXd> J, Lam, Nz;
};

DenseOps build_dense_ops(const SchemeWorkspace& ws) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L, M = grid.M;
  DenseOps d;
  d.L = L;
  d.M = M;
  d.Mw = MatrixXd::Zero(M, M);
  for (std::size_t i = 0; i < M; ++i) d.Mw(i, i) = grid.quad_w[i];
  const MatrixXd G = dense_grad(grid);
  d.J.reserve(L);
  for (std::size_t k = 0; k < L; ++k)
    d.J.push_back(d.Mw + tree.dt * dense_tridiag(ws.op[k + 1].stiffness));
  d.Lam.assign(L, MatrixXd::Zero(M, M));
  d.Nz.assign(L, MatrixXd::Zero(M, M));
  const auto& w = grid.quad_w;
  for (std::size_t k = 0; k < L; ++k) {
    const double* zd = !ws.zero_drift.empty() ? ws.zero_drift[k].data() : nullptr;
    const double* zn = !ws.zero_noise.empty() ? ws.zero_noise[k].data() : nullptr;
    const double* fd = !ws.first_drift.empty() ? ws.first_drift[k].data() : nullptr;
    const double* fn = !ws.first_noise.empty() ? ws.first_noise[k].data() : nullptr;
    if (ws.form == CoeffForm::NonDivergence) {
      if (zd)
        for (std::size_t i = 0; i < M; ++i) d.Lam[k](i, i) += w[i] * zd[i];
      if (fd)
        for (std::size_t i = 0; i < M; ++i) d.Lam[k].row(i) += w[i] * fd[i] * G.row(i);
      if (zn)
        for (std::size_t i = 0; i < M; ++i) d.Nz[k](i, i) += w[i] * zn[i];
      if (fn)
        for (std::size_t i = 0; i < M; ++i) d.Nz[k].row(i) += w[i] * fn[i] * G.row(i);
    } else if (ws.form == CoeffForm::Divergence) {
      if (zd)
        for (std::size_t i = 0; i < M; ++i) d.Lam[k](i, i) -= w[i] * zd[i];
      if (fd)
        for (std::size_t i = 0; i < M; ++i) d.Lam[k].col(i) -= w[i] * fd[i] * G.row(i).transpose();
      if (zn)
        for (std::size_t i = 0; i < M; ++i) d.Nz[k](i, i) -= w[i] * zn[i];
    }
  }
  return d;
}

using detail::FieldIdx;
using detail::field_size;

void check_size(const NoiseTree& tree, std::size_t M) {
  const std::size_t nodes = (std::size_t{2} << tree.L) - 1;
  if (nodes * M > 2000)
    throw ConfigInvalid("dense optimality oracle is limited to 2000 state unknowns");
}

struct System {
  MatrixXd A;
  VectorXd b;
  explicit System(std::size_t n)
      : A(MatrixXd::Zero(n, n)), b(VectorXd::Zero(n)) {}
  void block(std::size_t r, std::size_t c, const MatrixXd& m, double s = 1.0) {
    A.block(r, c, m.rows(), m.cols()) += s * m;
  }
  void diag(std::size_t r, std::size_t c, std::size_t M, double s) {
    for (std::size_t i = 0; i < M; ++i) A(r + i, c + i) += s;
  }
};

/// Solve and return the worst componentwise backward error. The weighted
/// systems mix row scales across hundreds of orders of magnitude, so the rows
/// are equilibrated first and one refinement step is applied; the backward
/// error is invariant under exact row scaling.
double solve_system(const System& sys, VectorXd& x) {
  VectorXd rmax = sys.A.cwiseAbs().rowwise().maxCoeff();
  for (Eigen::Index i = 0; i < rmax.size(); ++i)
    if (rmax[i] == 0.0) rmax[i] = 1.0;
  const MatrixXd As = rmax.cwiseInverse().asDiagonal() * sys.A;
  const VectorXd bs = sys.b.cwiseQuotient(rmax);
  const Eigen::PartialPivLU<MatrixXd> lu(As);
  x = lu.solve(bs);
  x += lu.solve(bs - As * x);
  const VectorXd r = As * x - bs;
  const VectorXd scale = As.cwiseAbs() * x.cwiseAbs() + bs.cwiseAbs();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    if (r[i] == 0.0) continue;
    worst = std::max(worst, std::abs(r[i]) / std::max(scale[i], 1e-300));
  }
  return worst;
}

void extract_levels(const VectorXd& x, const FieldIdx& f, std::size_t lo,
                    std::size_t hi, const NoiseTree& tree, AdaptedField& out) {
  for (std::size_t k = lo; k <= hi; ++k)
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      auto s = out.at(k, n);
      const std::size_t off = f.block(k, n);
      for (std::size_t i = 0; i < f.M; ++i) s[i] = x[off + i];
    }
}

void check_plain_cfg(const HumConfig& cfg) {
  if (!(cfg.epsilon > 0.0)) throw ConfigInvalid("hum epsilon must be positive");
}

void check_weighted_inputs(const SchemeWorkspace& ws, const WeightFamily& wf,
                           const AdaptedField& zdata, const WeightedHumConfig& cfg) {
  if (ws.form != CoeffForm::None || ws.robin_in_operator)
    throw ConfigInvalid("weighted HUM runs on the bare diffusion workspace");
  if (zdata.levels() < ws.tree->L || zdata.width() != ws.grid->M)
    throw LevelMismatch("weighted HUM: z data must cover levels 0..L-1");
  if (wf.T != ws.tree->T)
    throw ConfigInvalid("weight family horizon differs from the tree horizon");
  if (!(cfg.lambda > 0.0)) throw ConfigInvalid("weighted HUM lambda must be positive");
  if (!(cfg.epsilon > 0.0)) throw ConfigInvalid("weighted HUM epsilon must be positive");
}

double control_energy(const SpatialGrid& grid, const NoiseTree& tree,
                      const AdaptedField& u,
                      const std::vector<std::vector<double>>* weight) {
  double s = 0.0;
  for (std::size_t k = 0; k < u.levels(); ++k) {
    const double scale = tree.dt * tree.prob(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto us = u.at(k, n);
      double acc = 0.0;
      for (std::size_t i = 0; i < grid.M; ++i) {
        const double wc = weight ? (*weight)[k][i] : 1.0;
        acc += grid.quad_w[i] * wc * us[i] * us[i];
      }
      s += scale * acc;
    }
  }
  return s;
}

}  // namespace

OracleResult kkt_oracle_forward(const SchemeWorkspace& ws,
                                std::span<const double> y0, const HumConfig& cfg) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L, M = grid.M;
  if (y0.size() != M)
    throw ConfigInvalid("kkt_oracle_forward: y0 needs one value per grid node");
  check_plain_cfg(cfg);
  check_size(tree, M);

  const DenseOps d = build_dense_ops(ws);
  const double dt = tree.dt;
  const double inv2s = 1.0 / (2.0 * tree.sqrt_dt);
  MatrixXd Minv = MatrixXd::Zero(M, M);
  for (std::size_t i = 0; i < M; ++i) Minv(i, i) = 1.0 / grid.quad_w[i];

  const std::size_t sy = field_size(1, L, M);
  const std::size_t sz = field_size(0, L, M);
  const std::size_t sh = field_size(0, L - 1, M);
  const FieldIdx fy{0, 1, M}, fz{sy, 0, M}, fzb{sy + sz, 0, M},
      fzh{sy + sz + sh, 0, M}, fu{sy + sz + 2 * sh, 0, M},
      fv{sy + sz + 3 * sh, 0, M};
  System sys(sy + sz + 4 * sh);

  const Eigen::Map<const VectorXd> y0v(y0.data(), static_cast<Eigen::Index>(M));
  for (std::size_t k = 0; k < L; ++k) {
    const MatrixXd MinvLamT = Minv * d.Lam[k].transpose();
    const MatrixXd MinvNzT = Minv * d.Nz[k].transpose();
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double dw = tree.increment(c);
        const std::size_t row = fy.block(k + 1, 2 * n + c);
        sys.block(row, row, d.J[k]);
        const MatrixXd Rc = d.Mw + dt * d.Lam[k] + dw * d.Nz[k];
        if (k >= 1)
          sys.block(row, fy.block(k, n), Rc, -1.0);
        else
          sys.b.segment(row, M) += Rc * y0v;
        for (std::size_t i = 0; i < M; ++i) {
          if (grid.in_g0(i))
            sys.A(row + i, fu.block(k, n) + i) -= dt * grid.quad_w[i];
          sys.A(row + i, fv.block(k, n) + i) -= dw * grid.quad_w[i];
        }
      }
      const std::size_t rb = fzb.block(k, n), rh = fzh.block(k, n);
      sys.block(rb, rb, d.J[k]);
      sys.block(rh, rh, d.J[k]);
      for (std::size_t c = 0; c < 2; ++c) {
        sys.block(rb, fz.block(k + 1, 2 * n + c), d.Mw, -0.5);
        sys.block(rh, fz.block(k + 1, 2 * n + c), d.Mw,
                  c == 0 ? -inv2s : inv2s);
      }
      const std::size_t rz = fz.block(k, n);
      sys.diag(rz, rz, M, 1.0);
      sys.diag(rz, rb, M, -1.0);
      sys.block(rz, rb, MinvLamT, -dt);
      sys.block(rz, rh, MinvNzT, -dt);
      const std::size_t ru = fu.block(k, n), rv = fv.block(k, n);
      sys.diag(ru, ru, M, 1.0);
      for (std::size_t i = 0; i < M; ++i)
        if (grid.in_g0(i)) sys.A(ru + i, rb + i) += 1.0;
      sys.diag(rv, rv, M, 1.0);
      sys.diag(rv, rh, M, 1.0);
    }
  }
  for (std::size_t n = 0; n < tree.nodes_at(L); ++n) {
    const std::size_t row = fz.block(L, n);
    sys.diag(row, row, M, 1.0);
    sys.diag(row, fy.block(L, n), M, -1.0 / cfg.epsilon);
  }

  VectorXd x;
  OracleResult res;
  res.max_equation_residual = solve_system(sys, x);
  res.u = AdaptedField(tree, L, M);
  res.v = AdaptedField(tree, L, M);
  extract_levels(x, fu, 0, L - 1, tree, res.u);
  extract_levels(x, fv, 0, L - 1, tree, res.v);
  res.state = AdaptedField(tree, L + 1, M);
  std::copy(y0.begin(), y0.end(), res.state.at(0, 0).begin());
  extract_levels(x, fy, 1, L, tree, res.state);
  res.dual_leaf = LevelField{L, M, std::vector<double>(tree.nodes_at(L) * M)};
  {
    AdaptedField ztmp(tree, L + 1, M);
    extract_levels(x, fz, L, L, tree, ztmp);
    res.dual_leaf.values = ztmp.level_data(L);
  }
  res.cost_u = control_energy(grid, tree, res.u, nullptr);
  res.cost_v = control_energy(grid, tree, res.v, nullptr);
  res.terminal_sq = expect_inner(tree, L, grid.quad_w, res.state, res.state);
  res.objective =
      0.5 * (res.cost_u + res.cost_v) + res.terminal_sq / (2.0 * cfg.epsilon);
  return res;
}

OracleResult kkt_oracle_backward(const SchemeWorkspace& ws, const LevelField& yT,
                                 const HumConfig& cfg) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L, M = grid.M;
  if (yT.width != M || yT.values.size() != tree.nodes_at(L) * M)
    throw ConfigInvalid("kkt_oracle_backward: terminal data must fill the leaf level");
  check_plain_cfg(cfg);
  check_size(tree, M);

  const DenseOps d = build_dense_ops(ws);
  const double dt = tree.dt;
  const double inv2s = 1.0 / (2.0 * tree.sqrt_dt);
  MatrixXd Minv = MatrixXd::Zero(M, M);
  for (std::size_t i = 0; i < M; ++i) Minv(i, i) = 1.0 / grid.quad_w[i];

  const std::size_t sy = field_size(0, L - 1, M);
  const std::size_t sz = field_size(0, L, M);
  const FieldIdx fy{0, 0, M}, fyb{sy, 0, M}, fyh{2 * sy, 0, M}, fz{3 * sy, 0, M},
      fu{3 * sy + sz, 0, M};
  System sys(4 * sy + sz);

  for (std::size_t k = 0; k < L; ++k) {
    const MatrixXd MinvLamT = Minv * d.Lam[k].transpose();
    const MatrixXd MinvNzT = Minv * d.Nz[k].transpose();
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const std::size_t ry = fy.block(k, n);
      const std::size_t rb = fyb.block(k, n), rh = fyh.block(k, n);
      const std::size_t ru = fu.block(k, n);
      sys.diag(ry, ry, M, 1.0);
      sys.diag(ry, rb, M, -1.0);
      sys.block(ry, rb, MinvLamT, -dt);
      sys.block(ry, rh, MinvNzT, -dt);
      for (std::size_t i = 0; i < M; ++i)
        if (grid.in_g0(i)) sys.A(ry + i, ru + i) += dt;

      sys.block(rb, rb, d.J[k]);
      sys.block(rh, rh, d.J[k]);
      for (std::size_t c = 0; c < 2; ++c) {
        const double sb = -0.5;
        const double sh_ = (c == 0 ? -inv2s : inv2s);
        if (k + 1 <= L - 1) {
          sys.block(rb, fy.block(k + 1, 2 * n + c), d.Mw, sb);
          sys.block(rh, fy.block(k + 1, 2 * n + c), d.Mw, sh_);
        } else {
          const double* yd = yT.values.data() + (2 * n + c) * M;
          for (std::size_t i = 0; i < M; ++i) {
            sys.b[rb + i] -= sb * grid.quad_w[i] * yd[i];
            sys.b[rh + i] -= sh_ * grid.quad_w[i] * yd[i];
          }
        }
      }

      for (std::size_t c = 0; c < 2; ++c) {
        const double dw = tree.increment(c);
        const std::size_t row = fz.block(k + 1, 2 * n + c);
        sys.block(row, row, d.J[k]);
        const MatrixXd Rc = d.Mw + dt * d.Lam[k] + dw * d.Nz[k];
        sys.block(row, fz.block(k, n), Rc, -1.0);
      }

      sys.diag(ru, ru, M, 1.0);
      for (std::size_t i = 0; i < M; ++i)
        if (grid.in_g0(i)) sys.A(ru + i, fz.block(k, n) + i) -= 1.0;
    }
  }
  sys.diag(fz.block(0, 0), fz.block(0, 0), M, 1.0);
  sys.diag(fz.block(0, 0), fy.block(0, 0), M, -1.0 / cfg.epsilon);

  VectorXd x;
  OracleResult res;
  res.max_equation_residual = solve_system(sys, x);
  res.u = AdaptedField(tree, L, M);
  extract_levels(x, fu, 0, L - 1, tree, res.u);
  res.state = AdaptedField(tree, L + 1, M);
  extract_levels(x, fy, 0, L - 1, tree, res.state);
  res.state.level_data(L) = yT.values;
  res.dual_root.resize(M);
  for (std::size_t i = 0; i < M; ++i) res.dual_root[i] = x[fz.block(0, 0) + i];
  res.cost_u = control_energy(grid, tree, res.u, nullptr);
  {
    const auto v0 = res.state.at(0, 0);
    res.terminal_sq = dot_weighted(grid.quad_w, v0, v0);
  }
  res.objective = 0.5 * res.cost_u + res.terminal_sq / (2.0 * cfg.epsilon);
  return res;
}

OracleResult kkt_oracle_weighted_forward(const SchemeWorkspace& ws,
                                         const WeightFamily& wf,
                                         const AdaptedField& zdata,
                                         const WeightedHumConfig& cfg) {
  check_weighted_inputs(ws, wf, zdata, cfg);
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L, M = grid.M;
  check_size(tree, M);
  const detail::WeightSamples smp =
      detail::build_samples(wf, grid, tree, cfg.lambda, cfg.epsilon, true);
  const detail::WeightedKernel kr = detail::build_kernel(smp, M, cfg.lambda, true);
  const AdaptedField gz = detail::build_z_source(kr, grid, tree, zdata);
  // control unknowns carry the weight square roots so every stationarity row
  // stays O(1): ut + su rbar = 0 on G0 and vt + sv rhat = 0
  const std::vector<std::vector<double>> su = detail::control_scales(kr.src3);
  const std::vector<std::vector<double>> sv = detail::control_scales(kr.wv_inv);

  const DenseOps d = build_dense_ops(ws);
  const double dt = tree.dt;
  const double inv2s = 1.0 / (2.0 * tree.sqrt_dt);

  const std::size_t sy = field_size(1, L, M);
  const std::size_t sr = field_size(0, L, M);
  const std::size_t sh = field_size(0, L - 1, M);
  const FieldIdx fy{0, 1, M}, fr{sy, 0, M}, frb{sy + sr, 0, M},
      frh{sy + sr + sh, 0, M}, fu{sy + sr + 2 * sh, 0, M},
      fv{sy + sr + 3 * sh, 0, M};
  System sys(sy + sr + 4 * sh);

  for (std::size_t k = 0; k < L; ++k) {
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto gzs = gz.at(k, n);
      for (std::size_t c = 0; c < 2; ++c) {
        const double dw = tree.increment(c);
        const std::size_t row = fy.block(k + 1, 2 * n + c);
        sys.block(row, row, d.J[k]);
        if (k >= 1) sys.block(row, fy.block(k, n), d.Mw, -1.0);
        for (std::size_t i = 0; i < M; ++i) {
          if (grid.in_g0(i))
            sys.A(row + i, fu.block(k, n) + i) -= dt * grid.quad_w[i] * su[k][i];
          sys.A(row + i, fv.block(k, n) + i) -= dw * grid.quad_w[i] * sv[k][i];
          sys.b[row + i] += dt * grid.quad_w[i] * gzs[i];
        }
      }
      const std::size_t rb = frb.block(k, n), rh = frh.block(k, n);
      sys.block(rb, rb, d.J[k]);
      sys.block(rh, rh, d.J[k]);
      for (std::size_t c = 0; c < 2; ++c) {
        sys.block(rb, fr.block(k + 1, 2 * n + c), d.Mw, -0.5);
        sys.block(rh, fr.block(k + 1, 2 * n + c), d.Mw, c == 0 ? -inv2s : inv2s);
      }
      const std::size_t rr = fr.block(k, n);
      sys.diag(rr, rr, M, 1.0);
      sys.diag(rr, rb, M, -1.0);
      if (!kr.wy[k].empty() && k >= 1) {
        for (std::size_t i = 0; i < M; ++i) {
          double ci = kr.wy[k][i];
          if (i == 0) ci += kr.wtr[k][0] / grid.quad_w[0];
          if (i == M - 1) ci += kr.wtr[k][1] / grid.quad_w[M - 1];
          sys.A(rr + i, fy.block(k, n) + i) -= dt * ci;
        }
      }
      const std::size_t ru = fu.block(k, n), rv = fv.block(k, n);
      for (std::size_t i = 0; i < M; ++i) {
        sys.A(ru + i, ru + i) += 1.0;
        if (grid.in_g0(i)) sys.A(ru + i, rb + i) += su[k][i];
        sys.A(rv + i, rv + i) += 1.0;
        sys.A(rv + i, rh + i) += sv[k][i];
      }
    }
  }
  for (std::size_t n = 0; n < tree.nodes_at(L); ++n) {
    const std::size_t row = fr.block(L, n);
    sys.diag(row, row, M, 1.0);
    sys.diag(row, fy.block(L, n), M, -1.0 / cfg.epsilon);
  }

  VectorXd x;
  OracleResult res;
  res.max_equation_residual = solve_system(sys, x);
  AdaptedField ut(tree, L, M), vt(tree, L, M);
  extract_levels(x, fu, 0, L - 1, tree, ut);
  extract_levels(x, fv, 0, L - 1, tree, vt);
  res.u = AdaptedField(tree, L, M);
  res.v = AdaptedField(tree, L, M);
  for (std::size_t k = 0; k < L; ++k)
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto uts = ut.at(k, n);
      const auto vts = vt.at(k, n);
      auto us = res.u.at(k, n);
      auto vs = res.v.at(k, n);
      for (std::size_t i = 0; i < M; ++i) {
        us[i] = su[k][i] * uts[i];
        vs[i] = sv[k][i] * vts[i];
      }
    }
  res.state = AdaptedField(tree, L + 1, M);
  extract_levels(x, fy, 1, L, tree, res.state);
  res.dual_leaf = LevelField{L, M, std::vector<double>(tree.nodes_at(L) * M)};
  {
    AdaptedField rtmp(tree, L + 1, M);
    extract_levels(x, fr, L, L, tree, rtmp);
    res.dual_leaf.values = rtmp.level_data(L);
  }
  res.cost_u = control_energy(grid, tree, ut, nullptr);
  res.cost_v = control_energy(grid, tree, vt, nullptr);
  res.terminal_sq = expect_inner(tree, L, grid.quad_w, res.state, res.state);
  double state_cost = 0.0;
  for (std::size_t k = 1; k < L; ++k) {
    if (kr.wy[k].empty()) continue;
    const double scale = dt * tree.prob(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto ys = res.state.at(k, n);
      double acc = 0.0;
      for (std::size_t i = 0; i < M; ++i)
        acc += grid.quad_w[i] * kr.wy[k][i] * ys[i] * ys[i];
      acc += kr.wtr[k][0] * ys[0] * ys[0];
      acc += kr.wtr[k][1] * ys[M - 1] * ys[M - 1];
      state_cost += scale * acc;
    }
  }
  res.objective = 0.5 * (state_cost + res.cost_u + res.cost_v) +
                  res.terminal_sq / (2.0 * cfg.epsilon);
  return res;
}

OracleResult kkt_oracle_weighted_backward(const SchemeWorkspace& ws,
                                          const WeightFamily& wf,
                                          const AdaptedField& zdata,
                                          const WeightedHumConfig& cfg) {
  check_weighted_inputs(ws, wf, zdata, cfg);
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L, M = grid.M;
  check_size(tree, M);
  const detail::WeightSamples smp =
      detail::build_samples(wf, grid, tree, cfg.lambda, cfg.epsilon, false);
  const detail::WeightedKernel kr = detail::build_kernel(smp, M, cfg.lambda, false);
  const AdaptedField sz = detail::build_z_source(kr, grid, tree, zdata);
  // scaled control unknowns, stationarity ut - su r = 0 on G0
  const std::vector<std::vector<double>> su = detail::control_scales(kr.src3);

  const DenseOps d = build_dense_ops(ws);
  const double dt = tree.dt;
  const double inv2s = 1.0 / (2.0 * tree.sqrt_dt);

  const std::size_t sy = field_size(0, L - 1, M);
  const std::size_t sr = field_size(0, L, M);
  const FieldIdx fy{0, 0, M}, fyb{sy, 0, M}, fyh{2 * sy, 0, M}, fr{3 * sy, 0, M},
      fu{3 * sy + sr, 0, M};
  System sys(4 * sy + sr);

  for (std::size_t k = 0; k < L; ++k) {
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto szs = sz.at(k, n);
      const std::size_t ry = fy.block(k, n);
      const std::size_t rb = fyb.block(k, n), rh = fyh.block(k, n);
      const std::size_t ru = fu.block(k, n);
      sys.diag(ry, ry, M, 1.0);
      sys.diag(ry, rb, M, -1.0);
      for (std::size_t i = 0; i < M; ++i) {
        if (grid.in_g0(i)) sys.A(ry + i, ru + i) += dt * su[k][i];
        sys.b[ry + i] -= dt * szs[i];
      }

      sys.block(rb, rb, d.J[k]);
      sys.block(rh, rh, d.J[k]);
      if (k + 1 <= L - 1)
        for (std::size_t c = 0; c < 2; ++c) {
          sys.block(rb, fy.block(k + 1, 2 * n + c), d.Mw, -0.5);
          sys.block(rh, fy.block(k + 1, 2 * n + c), d.Mw,
                    c == 0 ? -inv2s : inv2s);
        }

      for (std::size_t c = 0; c < 2; ++c) {
        const std::size_t row = fr.block(k + 1, 2 * n + c);
        sys.block(row, row, d.J[k]);
        sys.block(row, fr.block(k, n), d.Mw, -1.0);
        for (std::size_t i = 0; i < M; ++i) {
          double ci = kr.wy[k][i];
          if (i == 0) ci += kr.wtr[k][0] / grid.quad_w[0];
          if (i == M - 1) ci += kr.wtr[k][1] / grid.quad_w[M - 1];
          sys.A(row + i, rb + i) -= dt * grid.quad_w[i] * ci;
        }
      }

      for (std::size_t i = 0; i < M; ++i) {
        sys.A(ru + i, ru + i) += 1.0;
        if (grid.in_g0(i)) sys.A(ru + i, fr.block(k, n) + i) -= su[k][i];
      }
    }
  }
  sys.diag(fr.block(0, 0), fr.block(0, 0), M, 1.0);
  sys.diag(fr.block(0, 0), fy.block(0, 0), M, -1.0 / cfg.epsilon);

  VectorXd x;
  OracleResult res;
  res.max_equation_residual = solve_system(sys, x);
  AdaptedField ut(tree, L, M);
  extract_levels(x, fu, 0, L - 1, tree, ut);
  res.u = AdaptedField(tree, L, M);
  for (std::size_t k = 0; k < L; ++k)
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto uts = ut.at(k, n);
      auto us = res.u.at(k, n);
      for (std::size_t i = 0; i < M; ++i) us[i] = su[k][i] * uts[i];
    }
  res.state = AdaptedField(tree, L + 1, M);
  extract_levels(x, fy, 0, L - 1, tree, res.state);
  res.dual_root.resize(M);
  for (std::size_t i = 0; i < M; ++i) res.dual_root[i] = x[fr.block(0, 0) + i];
  res.cost_u = control_energy(grid, tree, ut, nullptr);
  {
    const auto v0 = res.state.at(0, 0);
    res.terminal_sq = dot_weighted(grid.quad_w, v0, v0);
  }
  AdaptedField ybar(tree, L, M);
  extract_levels(x, fyb, 0, L - 1, tree, ybar);
  double state_cost = 0.0;
  for (std::size_t k = 0; k < L; ++k) {
    const double scale = dt * tree.prob(k);
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto ys = ybar.at(k, n);
      double acc = 0.0;
      for (std::size_t i = 0; i < M; ++i)
        acc += grid.quad_w[i] * kr.wy[k][i] * ys[i] * ys[i];
      acc += kr.wtr[k][0] * ys[0] * ys[0];
      acc += kr.wtr[k][1] * ys[M - 1] * ys[M - 1];
      state_cost += scale * acc;
    }
  }
  res.objective = 0.5 * (state_cost + res.cost_u) +
                  res.terminal_sq / (2.0 * cfg.epsilon);
  return res;
}

LevelField gramian_apply_forward_dense(const SchemeWorkspace& ws,
                                       const LevelField& a) {
  const SpatialGrid& grid = *ws.grid;
  const NoiseTree& tree = *ws.tree;
  const std::size_t L = tree.L, M = grid.M;
  if (a.width != M || a.values.size() != tree.nodes_at(L) * M)
    throw LevelMismatch("gramian_apply_forward_dense: leaf field has the wrong shape");
  check_size(tree, M);
  const DenseOps d = build_dense_ops(ws);
  const double dt = tree.dt;
  const double inv2s = 1.0 / (2.0 * tree.sqrt_dt);
  std::vector<Eigen::PartialPivLU<MatrixXd>> lu;
  lu.reserve(L);
  for (std::size_t k = 0; k < L; ++k) lu.emplace_back(d.J[k]);

  // dense backward sweep
  std::vector<std::vector<VectorXd>> z(L + 1), zb(L), zh(L);
  z[L].resize(tree.nodes_at(L));
  for (std::size_t n = 0; n < tree.nodes_at(L); ++n)
    z[L][n] = Eigen::Map<const VectorXd>(a.values.data() + n * M,
                                         static_cast<Eigen::Index>(M));
  for (std::size_t k = L; k-- > 0;) {
    z[k].resize(tree.nodes_at(k));
    zb[k].resize(tree.nodes_at(k));
    zh[k].resize(tree.nodes_at(k));
    MatrixXd MinvLamT = d.Lam[k].transpose();
    MatrixXd MinvNzT = d.Nz[k].transpose();
    for (std::size_t i = 0; i < M; ++i) {
      MinvLamT.row(i) /= grid.quad_w[i];
      MinvNzT.row(i) /= grid.quad_w[i];
    }
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const VectorXd avg = 0.5 * (z[k + 1][2 * n] + z[k + 1][2 * n + 1]);
      const VectorXd mart = inv2s * (z[k + 1][2 * n] - z[k + 1][2 * n + 1]);
      zb[k][n] = lu[k].solve(d.Mw * avg);
      zh[k][n] = lu[k].solve(d.Mw * mart);
      z[k][n] = zb[k][n] + dt * (MinvLamT * zb[k][n] + MinvNzT * zh[k][n]);
    }
  }

  // dense forward sweep with g = masked mean half-state, q = martingale part
  std::vector<std::vector<VectorXd>> y(L + 1);
  y[0].assign(1, VectorXd::Zero(static_cast<Eigen::Index>(M)));
  for (std::size_t k = 0; k < L; ++k) {
    y[k + 1].resize(tree.nodes_at(k + 1));
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      VectorXd g = zb[k][n];
      for (std::size_t i = 0; i < M; ++i)
        if (!grid.in_g0(i)) g[i] = 0.0;
      for (std::size_t c = 0; c < 2; ++c) {
        const double dw = tree.increment(c);
        const VectorXd rhs = d.Mw * y[k][n] + dt * d.Lam[k] * y[k][n] +
                             dw * d.Nz[k] * y[k][n] + dt * d.Mw * g +
                             dw * d.Mw * zh[k][n];
        y[k + 1][2 * n + c] = lu[k].solve(rhs);
      }
    }
  }
  LevelField out{L, M, std::vector<double>(tree.nodes_at(L) * M)};
  for (std::size_t n = 0; n < tree.nodes_at(L); ++n)
    for (std::size_t i = 0; i < M; ++i) out.values[n * M + i] = y[L][n][i];
  return out;
}

}  // namespace spc
