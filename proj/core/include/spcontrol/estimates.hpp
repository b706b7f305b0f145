#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"
#include "spcontrol/weights.hpp"

namespace spc {

/// log(sum_i exp(v_i)); -infinity entries are skipped, an empty or all
/// -infinity input yields -infinity. Never over/underflows for finite input.
double log_sum_exp(std::span<const double> v);

/// Term-by-term tabulation of the weighted energy inequality for one
/// solution over a lambda grid. Every entry is a natural log with the
/// lambda powers included; an identically zero term is -infinity.
///
/// Quadrature: interior time levels k = 1..L-1 evaluated at the node times
/// t_k with weight dt each (the weight vanishes at t = 0 and t = T, so the
/// endpoint levels are excluded analytically), trapezoid in x for interior
/// integrals, the two-point counting measure for boundary sums, and the
/// level probabilities for the expectation. The gradient uses the same
/// centered differences as the stiffness assembly.
struct CarlemanReport {
  std::vector<double> lambda_grid;

  std::vector<double> log_lhs_interior;  // lam^3 E int theta^2 phi^3 z^2
  std::vector<double> log_lhs_grad;      // lam   E int theta^2 phi  |grad z|^2
  std::vector<double> log_lhs_trace;     // lam^2 E sum_bdry theta^2 phi^2 z^2
  std::vector<double> log_rhs_local;     // lam^3 E int_{G0} theta^2 phi^3 z^2
  std::vector<double> log_rhs_drift;     // E int theta^2 F1^2
  std::vector<double> log_rhs_boundary;  // lam E sum_bdry theta^2 phi flux^2
  std::vector<double> log_rhs_div;       // lam^2 E int theta^2 phi^2 |F|^2
  std::vector<double> log_rhs_noise;     // lam^2 E int theta^2 phi^2 Z^2
  // lam^3 E int theta^2 phi^3 Z^2; feeds the absorption bounds of the
  // backward estimate (always -infinity for forward reports).
  std::vector<double> log_noise_phi3;

  std::vector<double> log_lhs;  // log-sum of the three lhs terms
  std::vector<double> log_rhs;  // log-sum of the five rhs terms
  std::vector<double> ratio;    // exp(log_lhs - log_rhs); 0 for an empty lhs

  LambdaThreshold threshold;
  std::vector<std::string> diagnostics;  // lambdas below the threshold
};

/// Evaluate the backward-equation estimate: z is the bundle's state, Z its
/// martingale part, and the sources supply the drift F1, the divergence
/// field F and the boundary flux. The bundle must come from a backward
/// solve on `ws` (state levels 0..L, mart_half levels 0..L-1); the lambda
/// threshold is derived from the workspace's coefficient norms.
CarlemanReport carleman_eval_backward(const SchemeWorkspace& ws,
                                      const SolutionBundle& bundle,
                                      const SourceSpec& sources,
                                      const WeightFamily& wf,
                                      std::span<const double> lambda_grid);

/// Forward-equation variant: the rhs noise term takes the dW source of the
/// forward scheme (weight lam^2 phi^2) instead of the solution's martingale
/// part, and the boundary term holds the forward flux data.
CarlemanReport carleman_eval_forward(const SchemeWorkspace& ws,
                                     const SolutionBundle& bundle,
                                     const SourceSpec& sources,
                                     const WeightFamily& wf,
                                     std::span<const double> lambda_grid);

/// Rewrite the coefficient terms of the backward adjoint pair (z, Z) as
/// explicit sources for the diffusion-only estimate:
///   F1 = -(a1 z + a2 Z),  F = B1 z + B2 Z,  flux = -beta z on the boundary.
/// Sampled at the node times t_k, k = 0..L-1, with Z = zhat. The fields are
/// meant for carleman_eval_backward; the signs only matter if they are fed
/// back into a solver.
SourceSpec substitution_backward(const SpatialGrid& grid, const NoiseTree& tree,
                                 const CoefficientSet& coeffs,
                                 const AdaptedField& z, const AdaptedField& zhat);

/// Forward adjoint variant (random parabolic equation):
///   F1 = -a1 z,  noise = -a2 z,  F = B z,  flux = -beta z.
SourceSpec substitution_forward(const SpatialGrid& grid, const NoiseTree& tree,
                                const CoefficientSet& coeffs, const AdaptedField& z);

/// One absorbable right-hand side term together with the weighted-energy
/// bound the observability argument compares it against (logs, constant 1).
struct AbsorptionCheck {
  std::string label;
  double log_term = 0.0;
  double log_bound = 0.0;
  bool holds() const { return !(log_term > log_bound); }
};

/// The absorption comparisons behind the observability constants at one
/// lambda index. `backward` selects the backward-equation set (zero- and
/// first-order terms against a quarter of the interior term plus the phi^3
/// noise energy, boundary term against half the trace term); the forward
/// set absorbs all interior rhs terms into half the interior lhs term.
std::vector<AbsorptionCheck> absorption_checks(const CarlemanReport& report,
                                               std::size_t lambda_index,
                                               bool backward);

/// Endpoint-versus-observation ratios of an adjoint ensemble.
struct ObservabilityReport {
  std::size_t samples = 0;
  std::vector<double> ratios;  // per-sample endpoint energy / observed energy
  double max_ratio = 0.0;
  double median_ratio = 0.0;
  double min_ratio = 0.0;
  double exponent = 0.0;  // coefficient/horizon aggregate of the cost bound
  double fitted_c = 0.0;  // log(max_ratio) / exponent
  std::vector<std::string> diagnostics;
};

/// Observability constant of the forward control problem: per terminal
/// datum, sweep the backward adjoint with no sources and compare
/// |z(0)|^2 against the G0 energy of z plus the full-domain energy of its
/// martingale part (trapezoid in t for z, plain dt steps for Z). The
/// exponent is the forward cost aggregate of the workspace's norms.
/// Requires at least 10 samples.
ObservabilityReport observability_forward(const SchemeWorkspace& ws,
                                          const std::vector<LevelField>& terminal_data);

/// Observability constant of the backward control problem: per initial
/// datum, sweep the forward adjoint with no sources and compare E|z(T)|^2
/// against the G0 energy of z. The exponent is the backward cost aggregate.
ObservabilityReport observability_backward(
    const SchemeWorkspace& ws, const std::vector<std::vector<double>>& initial_data);

/// Time-trapezoid energy of an adapted state over [t_lo, t_hi]: sum of
/// dt E|z_k|^2 (mass-weighted) over levels with t_k inside the window,
/// halved at levels matching an endpoint.
double time_window_energy(const SpatialGrid& grid, const NoiseTree& tree,
                          const AdaptedField& z, double t_lo, double t_hi);

/// log of min_x (resp. max_x) over the grid nodes of theta^2 phi^3 at time
/// t. These are the factors that strip the weight from the windowed energy.
/// Throws TimeOnBoundary at t in {0, T}.
double log_weight_floor(const WeightFamily& wf, const SpatialGrid& grid,
                        double lambda, double t);
double log_weight_peak(const WeightFamily& wf, const SpatialGrid& grid,
                       double lambda, double t);

/// Ensemble aggregate over reports sharing one lambda grid: the two sides
/// are log-summed across samples, so ratio is the batch constant per lambda.
struct CarlemanBatch {
  std::vector<double> lambda_grid;
  std::vector<double> log_lhs;
  std::vector<double> log_rhs;
  std::vector<double> ratio;
  double ratio_min = 0.0;
  double ratio_median = 0.0;
  double ratio_max = 0.0;
  double spread = 0.0;  // ratio_max / ratio_min; 1 for an all-zero batch
};

CarlemanBatch aggregate_reports(const std::vector<CarlemanReport>& reports);

}  // namespace spc
