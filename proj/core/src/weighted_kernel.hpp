#pragma once

// Internal helpers shared by the weighted HUM solver and its dense oracle:
// log-space samples of the Carleman weight family and the concrete source /
// cost arrays derived from them.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "spcontrol/errors.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/weights.hpp"

namespace spc::detail {

/// Flat index of unknown blocks stored level by level from `lo` upward.
struct FieldIdx {
  std::size_t base = 0;
  std::size_t lo = 0;
  std::size_t M = 0;
  std::size_t block(std::size_t k, std::size_t n) const {
    return base + (((std::size_t{1} << k) - (std::size_t{1} << lo)) + n) * M;
  }
};

inline std::size_t field_size(std::size_t lo, std::size_t hi, std::size_t M) {
  return ((std::size_t{2} << hi) - (std::size_t{1} << lo)) * M;
}

/// Elementwise square roots of a per-level weight table. Controls are solved
/// for in these scaled variables so that quadratic cost sums never underflow.
inline std::vector<std::vector<double>> control_scales(
    const std::vector<std::vector<double>>& w) {
  std::vector<std::vector<double>> s(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    s[k].resize(w[k].size());
    for (std::size_t i = 0; i < w[k].size(); ++i) s[k][i] = std::sqrt(w[k][i]);
  }
  return s;
}

/// Log-space weight samples. Midpoint tables drive the control weights and
/// the z sources; cost tables sit at the state-cost times (node times for the
/// forward variant, midpoints for the backward one; level 0 of the forward
/// tables stays empty because the state starts at zero there).
struct WeightSamples {
  std::vector<std::vector<double>> exa;   // 2 lambda alpha at midpoints
  std::vector<std::vector<double>> lph;   // log phi at midpoints
  std::vector<std::vector<double>> era;   // 2 lambda alpha_eps at cost times
  std::vector<std::vector<double>> exac;  // 2 lambda alpha at cost times
  std::vector<std::vector<double>> lphc;  // log phi at cost times
};

inline WeightSamples build_samples(const WeightFamily& wf, const SpatialGrid& grid,
                                   const NoiseTree& tree, double lambda, double eps,
                                   bool cost_at_nodes) {
  const std::size_t L = tree.L, M = grid.M;
  WeightSamples s;
  s.exa.assign(L, {});
  s.lph.assign(L, {});
  s.era.assign(L, {});
  s.exac.assign(L, {});
  s.lphc.assign(L, {});
  double emax = 0.0;
  for (std::size_t k = 0; k < L; ++k) {
    const double tm = (static_cast<double>(k) + 0.5) * tree.dt;
    s.exa[k].resize(M);
    s.lph[k].resize(M);
    for (std::size_t i = 0; i < M; ++i) {
      const auto p = wf.eval(tm, grid.node(i));
      s.exa[k][i] = 2.0 * lambda * p.alpha;
      s.lph[k][i] = p.log_phi;
      emax = std::max(emax, std::abs(s.exa[k][i]) + 3.0 * std::abs(s.lph[k][i]));
    }
    if (cost_at_nodes && k == 0) continue;
    const double tc = cost_at_nodes ? tree.time_at(k) : tm;
    s.era[k].resize(M);
    s.exac[k].resize(M);
    s.lphc[k].resize(M);
    for (std::size_t i = 0; i < M; ++i) {
      const double x = grid.node(i);
      const auto pr = wf.eval_reg(tc, x, eps);
      const auto pu = wf.eval(tc, x);
      s.era[k][i] = 2.0 * lambda * pr.alpha;
      s.exac[k][i] = 2.0 * lambda * pu.alpha;
      s.lphc[k][i] = pu.log_phi;
      emax = std::max(emax, std::abs(s.era[k][i]) + std::abs(s.lphc[k][i]));
      emax =
          std::max(emax, std::abs(s.exac[k][i]) + 3.0 * std::abs(s.lphc[k][i]));
    }
  }
  if (emax > 690.0)
    throw ConfigInvalid(
        "weighted HUM weight exponents exceed the double range; reduce lambda, "
        "mu, or the time horizon");
  return s;
}

/// Concrete weight arrays derived from the samples.
struct WeightedKernel {
  std::vector<std::vector<double>> src3;     // lambda^3 theta^2 phi^3 at midpoints
  std::vector<std::array<double, 2>> src2;   // lambda^2 theta^2 phi^2, boundary
  std::vector<std::vector<double>> wu_cost;  // lambda^-3 theta^-2 phi^-3
  std::vector<std::vector<double>> wv_cost;  // lambda^-2 theta^-2 phi^-2
  std::vector<std::vector<double>> wv_inv;   // reciprocal of wv_cost
  std::vector<std::vector<double>> wy;       // theta_eps^-2 at cost times
  std::vector<std::array<double, 2>> wtr;    // lambda^-1 theta_eps^-2 phi^-1
};

inline WeightedKernel build_kernel(const WeightSamples& s, std::size_t M,
                                   double lambda, bool with_v) {
  const std::size_t L = s.exa.size();
  WeightedKernel k;
  k.src3.assign(L, {});
  k.src2.assign(L, {});
  k.wu_cost.assign(L, {});
  k.wy.assign(L, {});
  k.wtr.assign(L, {});
  if (with_v) {
    k.wv_cost.assign(L, {});
    k.wv_inv.assign(L, {});
  }
  const double l2 = lambda * lambda, l3 = l2 * lambda;
  for (std::size_t lev = 0; lev < L; ++lev) {
    k.src3[lev].resize(M);
    k.wu_cost[lev].resize(M);
    if (with_v) {
      k.wv_cost[lev].resize(M);
      k.wv_inv[lev].resize(M);
    }
    for (std::size_t i = 0; i < M; ++i) {
      const double e3 = s.exa[lev][i] + 3.0 * s.lph[lev][i];
      k.src3[lev][i] = l3 * std::exp(e3);
      k.wu_cost[lev][i] = std::exp(-e3) / l3;
      if (with_v) {
        const double e2 = s.exa[lev][i] + 2.0 * s.lph[lev][i];
        k.wv_cost[lev][i] = std::exp(-e2) / l2;
        k.wv_inv[lev][i] = l2 * std::exp(e2);
      }
    }
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t i = (j == 0) ? 0 : M - 1;
      k.src2[lev][j] = l2 * std::exp(s.exa[lev][i] + 2.0 * s.lph[lev][i]);
    }
    if (!s.era[lev].empty()) {
      k.wy[lev].resize(M);
      for (std::size_t i = 0; i < M; ++i) k.wy[lev][i] = std::exp(-s.era[lev][i]);
      for (std::size_t j = 0; j < 2; ++j) {
        const std::size_t i = (j == 0) ? 0 : M - 1;
        k.wtr[lev][j] = std::exp(-s.era[lev][i] - s.lphc[lev][i]) / lambda;
      }
    }
  }
  return k;
}

/// Weighted z source: lambda^3 theta^2 phi^3 z plus the mass-inverted lift of
/// the boundary data lambda^2 theta^2 phi^2 z.
inline AdaptedField build_z_source(const WeightedKernel& kr, const SpatialGrid& grid,
                                   const NoiseTree& tree, const AdaptedField& z) {
  const std::size_t L = tree.L, M = grid.M;
  AdaptedField g(tree, L, M);
  for (std::size_t k = 0; k < L; ++k)
    for (std::size_t n = 0; n < tree.nodes_at(k); ++n) {
      const auto zs = z.at(k, n);
      auto gs = g.at(k, n);
      for (std::size_t i = 0; i < M; ++i) gs[i] = kr.src3[k][i] * zs[i];
      gs[0] += kr.src2[k][0] * zs[0] / grid.quad_w[0];
      gs[M - 1] += kr.src2[k][1] * zs[M - 1] / grid.quad_w[M - 1];
    }
  return g;
}

}  // namespace spc::detail
