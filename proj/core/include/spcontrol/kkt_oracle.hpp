#pragma once

#include <span>
#include <vector>

#include "spcontrol/hum.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"
#include "spcontrol/weights.hpp"

namespace spc {

/// Brute-force solution of a penalized control problem: the full first-order
/// optimality system (state equations, half-state equations, adjoint
/// equations, penalty coupling, control characterizations) is assembled over
/// every tree node and grid point as one dense linear system and solved
/// directly. Intended as an independent cross-check of the iterative solvers
/// on tiny instances.
struct OracleResult {
  AdaptedField u;      ///< distributed control, zero outside the control window
  AdaptedField v;      ///< noise-channel control; empty for backward problems
  AdaptedField state;  ///< optimal state trajectory, L+1 levels
  std::vector<double> dual_root;  ///< adjoint initial value (backward problems)
  LevelField dual_leaf;           ///< adjoint terminal value (forward problems)
  double cost_u = 0.0;       ///< control energy of u (weighted where applicable)
  double cost_v = 0.0;       ///< control energy of v
  double terminal_sq = 0.0;  ///< squared norm of the state at the penalized end
  double objective = 0.0;    ///< full objective value at the optimum
  /// Worst componentwise backward error |Ax - b|_i / (|A||x| + |b|)_i over
  /// every assembled equation.
  double max_equation_residual = 0.0;
};

/// Requires (number of tree nodes) * M <= 2000; throws ConfigInvalid beyond.
OracleResult kkt_oracle_forward(const SchemeWorkspace& ws,
                                std::span<const double> y0, const HumConfig& cfg);
OracleResult kkt_oracle_backward(const SchemeWorkspace& ws, const LevelField& yT,
                                 const HumConfig& cfg);
OracleResult kkt_oracle_weighted_forward(const SchemeWorkspace& ws,
                                         const WeightFamily& wf,
                                         const AdaptedField& zdata,
                                         const WeightedHumConfig& cfg);
OracleResult kkt_oracle_weighted_backward(const SchemeWorkspace& ws,
                                          const WeightFamily& wf,
                                          const AdaptedField& zdata,
                                          const WeightedHumConfig& cfg);

/// gramian_apply_forward recomputed with dense direct solves in place of the
/// tridiagonal sweeps; used to check the Gramian column by column.
LevelField gramian_apply_forward_dense(const SchemeWorkspace& ws,
                                       const LevelField& a);

}  // namespace spc
