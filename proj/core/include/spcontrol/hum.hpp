#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"
#include "spcontrol/weights.hpp"

namespace spc {

/// Penalized HUM: minimize  sum_k dt E|controls|^2 / 2 + E|y(end)|^2 / (2 eps)
/// by conjugate gradients on the eps-shifted control Gramian of the dual pair.
struct HumConfig {
  double epsilon = 1e-2;
  double cg_tol = 1e-8;  // relative residual target, see solve_hum_* docs
  std::size_t cg_max_iters = 400;
  double c_cal = 1.0;  // calibration constant in the cost-bound exponent
};

/// Per-iteration CG history. The dual objective -<b + r, x>/2 decreases
/// monotonically in exact arithmetic; tests use it as the solver invariant.
struct CgTrace {
  std::vector<double> residual;
  std::vector<double> objective;
};

struct HumResult {
  AdaptedField u;                 // drift control, width M, supported in G0
  AdaptedField v;                 // noise control (forward problem only)
  LevelField dual_leaf;           // forward: CG minimizer on the leaf level
  std::vector<double> dual_root;  // backward: CG minimizer at the root
  SolutionBundle state;           // controlled trajectory

  double data_sq = 0.0;      // |y_0|^2_M resp. E|y_T|^2_M
  double terminal_sq = 0.0;  // E|y(T)|^2_M reached, resp. |y(0)|^2_M
  double cost_u = 0.0;       // sum_k dt E|u_k|^2_M
  double cost_v = 0.0;
  // |y(end) + eps * dual|_M: the optimality identity defect, bounded by the
  // final CG residual.
  double identity_gap = 0.0;
  double duality_residual = 0.0;  // discrete Ito pairing check on the result
  std::size_t iterations = 0;
  CgTrace trace;
  double exponent = 0.0;    // coefficient aggregate K resp. M of the pair
  double cost_bound = 0.0;  // e^{c_cal * exponent} * data_sq
};

/// Gramian action for the forward problem: solve the homogeneous dual
/// backward from leaf data `a`, feed u = 1_{G0} zbar, v = Zhat into the state
/// equation from zero data and return the terminal state. Symmetric positive
/// semidefinite in the leaf product sum_n 2^{-L} <.,.>_M.
LevelField gramian_apply_forward(const SchemeWorkspace& ws, const LevelField& a);

/// Backward counterpart on deterministic initial data: solve the dual
/// forward from `a`, feed u = -1_{G0} z into the backward state equation from
/// zero terminal data and return the initial state. Symmetric positive
/// semidefinite in <.,.>_M.
std::vector<double> gramian_apply_backward(const SchemeWorkspace& ws,
                                           std::span<const double> a);

/// Null control of the forward pair: CG on (Gram + eps I) x = -y_free(end),
/// controls u = 1_{G0} zbar(x), v = Zhat(x). Stops once the residual drops
/// below cg_tol / 4 * min(|rhs|, eps |x|), which pins the terminal identity
/// y(T) = -eps x to a relative cg_tol / 4. The workspace must hold the
/// NonDivergence pair with Robin boundary operators.
HumResult solve_hum_forward(const SchemeWorkspace& ws, std::span<const double> y0,
                            const HumConfig& cfg);

/// Null control of the backward pair (Divergence-form workspace): control
/// u = -1_{G0} z(x) with x solving (Gram + eps I) x = -y_free(0).
HumResult solve_hum_backward(const SchemeWorkspace& ws, const LevelField& yT,
                             const HumConfig& cfg);

/// Weighted HUM behind the Carleman-based observability estimates: the state
/// equation is driven by weighted samples of a given dual field z plus the
/// control, and the functional carries inverse-weight control costs, weighted
/// state costs and the end-point penalty. Weight scale lambda is fixed;
/// epsilon doubles as penalty weight and as the time regularization of the
/// state-cost weights.
struct WeightedHumConfig {
  double lambda = 1.0;
  double epsilon = 0.5;
  double cg_tol = 1e-10;
  std::size_t cg_max_iters = 600;
};

struct WeightedHumResult {
  AdaptedField u;        // drift control, width M, supported in G0
  AdaptedField v;        // noise control (forward variant only)
  SolutionBundle state;  // controlled trajectory at the optimum

  // Log of the five certified left-hand terms evaluated on the optimum:
  // control cost, interior state, boundary state, state gradient and noise
  // part (v resp. the martingale half-field). -inf marks an empty sum.
  double log_lhs_u = 0.0;
  double log_lhs_y = 0.0;
  double log_lhs_trace = 0.0;
  double log_lhs_grad = 0.0;
  double log_lhs_noise = 0.0;
  double log_lhs = 0.0;  // log-sum-exp of the five
  // Log of the two data terms lambda^3 E int theta^2 phi^3 z^2 and
  // lambda^2 E int_bdry theta^2 phi^2 z^2.
  double log_rhs_interior = 0.0;
  double log_rhs_trace = 0.0;
  double log_rhs = 0.0;
  double fitted_c = 0.0;  // exp(log_lhs - log_rhs)

  double penalty_sq = 0.0;         // E|y(T)|^2_M resp. |y(0)|^2_M
  double identity_residual = 0.0;  // relative defect of the optimality identity
  std::size_t iterations = 0;
  CgTrace trace;
};

/// Forward variant: state runs forward from zero with drift source
/// lambda^3 theta^2 phi^3 z + 1_{G0} u, boundary flux lambda^2 theta^2 phi^2 z
/// and noise control v. `zdata` needs levels 0..L-1 of width M; the workspace
/// must be the bare-diffusion one (CoeffForm::None, no Robin term).
WeightedHumResult solve_weighted_hum_forward(const SchemeWorkspace& ws,
                                             const WeightFamily& wf,
                                             const AdaptedField& zdata,
                                             const WeightedHumConfig& cfg);

/// Backward variant: state runs backward from zero with the sign-flipped
/// weighted z sources, single control u, and initial-value penalty.
WeightedHumResult solve_weighted_hum_backward(const SchemeWorkspace& ws,
                                              const WeightFamily& wf,
                                              const AdaptedField& zdata,
                                              const WeightedHumConfig& cfg);

}  // namespace spc
