#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spcontrol/grid.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/weights.hpp"

namespace spc {

/// Space-time coefficient: either a constant or a table sampled on a uniform
/// nt x nx grid over [0,T] x [0,1], evaluated by bilinear interpolation.
class Coefficient {
 public:
  Coefficient() = default;
  /*implicit*/ Coefficient(double c) : constant_(c) {}

  /// Table rows are time samples (t_j = j T / (nt-1)), columns space samples.
  /// Requires nt, nx >= 2 and values.size() == nt * nx.
  static Coefficient table(double T, std::size_t nt, std::size_t nx,
                           std::vector<double> values);

  double operator()(double t, double x) const;
  bool is_constant() const { return values_.empty(); }
  bool is_zero() const { return values_.empty() && constant_ == 0.0; }
  double constant_value() const { return constant_; }

 private:
  double constant_ = 0.0;
  double T_ = 0.0;
  std::size_t nt_ = 0, nx_ = 0;
  std::vector<double> values_;
};

/// Coefficient family of the equation pair. `a` is the diffusion (must stay
/// positive), `a1`/`B1` the zero/first order drift and `a2`/`B2` the
/// zero/first order noise coefficients of the forward pair, `B` the
/// first-order drift of the backward pair, `beta` the Robin coefficient
/// evaluated at the two boundary points.
struct CoefficientSet {
  Coefficient a{1.0};
  Coefficient a1, a2, B1, B2, B;
  Coefficient beta;
  double c0 = 0.0;  // declared ellipticity floor; 0 means "use the observed min"

  /// Sup-norms over the evaluation grid (tree levels x grid nodes; beta over
  /// levels x the two boundary points).
  CoefficientNorms norms(const SpatialGrid& grid, const NoiseTree& tree) const;
};

/// How coefficient terms enter the scheme.
enum class CoeffForm {
  None,           // diffusion only; everything else comes in through sources
  NonDivergence,  // drift a1 y + B1 y_x, noise a2 y + B2 y_x
  Divergence,     // drift -a1 y - (B y)_x in weak form, noise -a2 y
};

/// Per-level operators shared by the forward scheme and its exact transpose:
/// assemblies S(t_k), factorizations of (mass + dt S(t_k)) for k = 1..L, and
/// nodewise samples of the explicit-side coefficients at t_k for k = 0..L-1.
struct SchemeWorkspace {
  const SpatialGrid* grid = nullptr;
  const NoiseTree* tree = nullptr;
  CoeffForm form = CoeffForm::None;
  bool robin_in_operator = false;

  std::vector<RobinAssembly> op;    // S(t_k), k = 0..L
  std::vector<TridiagFactor> step;  // factor of mass + dt S(t_k), k = 1..L
  // Samples at t_k, k = 0..L-1. Empty vector = identically zero coefficient.
  // In divergence form zero_drift/first_drift hold a1 and B; the noise has
  // no first-order part there.
  std::vector<std::vector<double>> zero_drift, zero_noise;
  std::vector<std::vector<double>> first_drift, first_noise;

  CoefficientNorms norms;
  double c0 = 0.0;   // observed (or declared) ellipticity floor
  double cfl = 0.0;  // max_k dt * |first-order coefficient| / h

  const TridiagFactor& solver_at(std::size_t level) const { return step[level - 1]; }
};

/// Sample coefficients and factor the time-step matrices. Validates the
/// declared ellipticity floor against the observed minimum of `a`.
SchemeWorkspace build_workspace(const SpatialGrid& grid, const NoiseTree& tree,
                                const CoefficientSet& coeffs, CoeffForm form,
                                bool robin_in_operator);

/// One forward pass over the tree:
///   (M + dt S(t_{k+1})) y_{k+1}(child) =
///       (M + dt La_k + dW N_k) y_k + dt M g_k + dW M q_k
/// where La/N realize the CoeffForm terms. y needs L+1 levels with level 0
/// set; g and q are optional L-level sources (interpreted against the mass
/// pairing, so boundary lifts must already be divided by the mass weights).
void forward_sweep(const SchemeWorkspace& ws, AdaptedField& y,
                   const AdaptedField* g, const AdaptedField* q);

/// Exact transpose of forward_sweep, stepping from level L down to 0:
///   zbar_k = (M + dt S(t_{k+1}))^{-1} M avg(z_{k+1})
///   Zhat_k = (M + dt S(t_{k+1}))^{-1} M mart(z_{k+1})
///   z_k    = zbar_k + dt M^{-1}(La_k^T zbar_k + N_k^T Zhat_k) + dt sigma_k
/// With these definitions the product-rule identity checked by
/// ito_duality_residual holds to roundoff for any source triplet.
/// z needs L+1 levels with level L set; zbar/zhat receive L levels.
void backward_sweep(const SchemeWorkspace& ws, AdaptedField& z, AdaptedField& zbar,
                    AdaptedField& zhat, const AdaptedField* sigma);

/// Equation selector for the high-level drivers.
enum class ProblemKind {
  ForwardControlled,   // forward state, NonDivergence coefficients, controls (u, v)
  BackwardControlled,  // backward state, transpose of the Divergence pair, control u
  AdjointBackward,     // dual of ForwardControlled (no sources)
  AdjointForward,      // dual of BackwardControlled (random parabolic, no sources)
  GeneralForward,      // diffusion only + explicit sources
  GeneralBackward,     // diffusion only + explicit sources
};

/// Optional source data on levels 0..L-1. Interior fields have width M,
/// boundary fields width 2 (values at x=0 and x=1).
struct SourceSpec {
  std::optional<AdaptedField> drift;       // F1
  std::optional<AdaptedField> divergence;  // F, enters as div F
  std::optional<AdaptedField> noise;       // forward kinds only: the dW source
  std::optional<AdaptedField> flux;        // width 2: inhomogeneous conormal flux
};

struct ProblemInstance {
  ProblemKind kind = ProblemKind::GeneralForward;
  CoefficientSet coeffs;
  SourceSpec sources;
  std::optional<AdaptedField> u;  // distributed control, width M, active on G0
  std::optional<AdaptedField> v;  // noise control (ForwardControlled only)
  std::vector<double> initial;    // forward kinds: state at t=0
  LevelField terminal;            // backward kinds: leaf data at level L
};

struct SolutionBundle {
  AdaptedField state;      // levels 0..L
  AdaptedField mean_half;  // backward kinds: zbar, levels 0..L-1
  AdaptedField mart_half;  // backward kinds: Zhat, levels 0..L-1
  std::vector<double> energy;    // E |state_k|^2_M per level
  std::vector<double> trace_sq;  // E [state_k(0)^2 + state_k(1)^2] per level
  std::vector<std::string> diagnostics;  // non-fatal warnings (CFL etc.)
};

SolutionBundle solve_forward(const SpatialGrid& grid, const NoiseTree& tree,
                             const ProblemInstance& inst);
SolutionBundle solve_backward(const SpatialGrid& grid, const NoiseTree& tree,
                              const ProblemInstance& inst);

/// g += scale * M^{-1} G^T (w .* F): weak-divergence contribution of F.
/// (scale -1 for the forward drift, +1 for the backward source.)
void add_divergence_source(const SpatialGrid& grid, std::span<const double> F,
                           double scale, std::span<double> g);
/// g += scale * M^{-1} lift(f0, f1): contribution of boundary flux data.
void add_flux_source(const SpatialGrid& grid, double f0, double f1, double scale,
                     std::span<double> g);
/// Zero a nodal field outside G0.
void mask_to_g0(const SpatialGrid& grid, std::span<double> f);

/// Stepwise energy budget of a backward solve, plus the Gronwall-style
/// bound fit. For backward bundles the per-step terms reproduce the energy
/// differences exactly (identity_residual is roundoff); for forward bundles
/// only the per-level energies and the bound fit are reported.
struct EnergyReport {
  std::vector<double> energy;        // E|z_k|^2, k = 0..L
  std::vector<double> dissipation;   // 2 dt E<S zbar, zbar> per step
  std::vector<double> trace_part;    // Robin part of the dissipation per step
  std::vector<double> mart_energy;   // dt E|mart(z_{k+1})|^2_M per step
  std::vector<double> coupling;      // -2 dt E<zbar, La^T zbar + N^T Zhat> per step
  std::vector<double> source_term;   // -2 dt E<zbar, sigma>_M per step
  std::vector<double> second_order;  // remaining dt^2 squares per step
  double identity_residual = 0.0;    // max relative defect of the step identity
  double r2 = 0.0;                   // Gronwall rate aggregate of the pair
  double noise_factor = 0.0;         // |B2|^2 sum dt E|Zhat|^2 (backward pair)
  double fitted_C = 0.0;  // smallest C >= 0 with
                          //   |z(0)|^2 <= e^{C r2 T} E|z(t_k)|^2 + C * noise_factor
                          // for every k (forward bundles: E|z(T)|^2 on the left)
};

/// `ws` must be the workspace the bundle was produced with; `sigma` the
/// backward source actually used (may be null).
EnergyReport energy_estimate(const SchemeWorkspace& ws, const SolutionBundle& b,
                             const AdaptedField* sigma, bool backward);

}  // namespace spc
