#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "spcontrol/errors.hpp"

namespace spc {

/// Binary non-recombining scenario tree for Brownian motion on [0,T].
///
/// Level k holds 2^k nodes; node n at level k has children 2n (increment
/// +sqrt(dt)) and 2n+1 (increment -sqrt(dt)) at level k+1. Every node at
/// level k has probability 2^{-k}. Conditional expectation is the exact
/// average over the two children, so the tower property holds exactly.
struct NoiseTree {
  std::size_t L = 0;   // number of time steps; levels run 0..L
  double T = 0.0;
  double dt = 0.0;
  double sqrt_dt = 0.0;

  std::size_t nodes_at(std::size_t level) const { return std::size_t{1} << level; }
  std::size_t total_nodes() const { return (std::size_t{2} << L) - 1; }
  double time_at(std::size_t level) const { return static_cast<double>(level) * dt; }
  double prob(std::size_t level) const {
    return 1.0 / static_cast<double>(std::size_t{1} << level);
  }
  /// Brownian increment carried by child c (0: +sqrt(dt), 1: -sqrt(dt)).
  double increment(std::size_t child_side) const {
    return child_side == 0 ? sqrt_dt : -sqrt_dt;
  }
  /// Accumulated Brownian value at a node (sum of increments on its path).
  double brownian_at(std::size_t level, std::size_t node) const {
    double w = 0.0;
    for (std::size_t k = level; k > 0; --k) {
      w += (node & 1) ? -sqrt_dt : sqrt_dt;
      node >>= 1;
    }
    return w;
  }
};

/// Build a tree with L in [1, 22]; beyond that the node count is no longer
/// desk scale. Throws DepthTooLarge otherwise.
NoiseTree build_tree(std::size_t L, double T);

/// Field adapted to the tree filtration: one vector of `width` values per
/// node, stored per level. `levels` counts stored levels starting at 0
/// (state fields use L+1 levels, control/source fields use L).
class AdaptedField {
 public:
  AdaptedField() = default;
  AdaptedField(const NoiseTree& tree, std::size_t levels, std::size_t width)
      : levels_(levels), width_(width), data_(levels) {
    for (std::size_t k = 0; k < levels; ++k)
      data_[k].assign(tree.nodes_at(k) * width, 0.0);
  }

  std::size_t levels() const { return levels_; }
  std::size_t width() const { return width_; }

  std::span<double> at(std::size_t level, std::size_t node) {
    return {data_[level].data() + node * width_, width_};
  }
  std::span<const double> at(std::size_t level, std::size_t node) const {
    return {data_[level].data() + node * width_, width_};
  }
  std::vector<double>& level_data(std::size_t level) { return data_[level]; }
  const std::vector<double>& level_data(std::size_t level) const { return data_[level]; }

 private:
  std::size_t levels_ = 0;
  std::size_t width_ = 0;
  std::vector<std::vector<double>> data_;
};

/// One level of node-indexed values (2^k nodes x width).
struct LevelField {
  std::size_t level = 0;
  std::size_t width = 0;
  std::vector<double> values;

  std::span<double> at(std::size_t node) { return {values.data() + node * width, width}; }
  std::span<const double> at(std::size_t node) const {
    return {values.data() + node * width, width};
  }
};

/// Conditional expectation one level down: out(n) = (f(2n) + f(2n+1)) / 2.
LevelField cond_expect(const NoiseTree& tree, const LevelField& f);

/// Martingale component: out(n) = (f(2n) - f(2n+1)) / (2 sqrt(dt)), the
/// coefficient of the increment in the one-step decomposition of f.
LevelField martingale_part(const NoiseTree& tree, const LevelField& f);

/// Expectation over a level: sum_n 2^{-k} f(n), per component.
std::vector<double> expectation(const NoiseTree& tree, const LevelField& f);

/// Expectation of the weighted inner product sum_i w_i a_i b_i over a level.
double expect_inner(const NoiseTree& tree, std::size_t level,
                    std::span<const double> w, const AdaptedField& a,
                    const AdaptedField& b);

/// Residual of the discrete product/Ito identity connecting a forward field
/// y and a backward field z produced by transposed schemes:
///
///   E<y_L, z_L> - <y_0, z_0> =
///     sum_k dt E[ <g_k, zbar_k> + <q_k, Zhat_k> - <y_k, sigma_k> ]
///
/// where <.,.> is the mass-weighted product, g and q are the drift and noise
/// sources of the forward scheme and sigma is the backward scheme's source.
/// zbar/Zhat are the backward solver's predicted mean and martingale parts.
/// Returns |lhs - rhs| / max(scale of the individual terms, tiny).
double ito_duality_residual(const NoiseTree& tree, std::span<const double> mass,
                            const AdaptedField& y, const AdaptedField& z,
                            const AdaptedField& zbar, const AdaptedField& zhat,
                            const AdaptedField* g, const AdaptedField* q,
                            const AdaptedField* sigma);

/// Deterministic field generators for ensembles and tests. All draws come
/// from the supplied engine in a fixed order.
namespace fields {

/// Smooth deterministic profile: random combination of the first few
/// Fourier modes, same values on every node of the level.
std::vector<double> smooth_profile(std::size_t M, std::mt19937_64& rng);

/// Nodewise iid standard normals across the whole level.
LevelField rough_level(const NoiseTree& tree, std::size_t level, std::size_t M,
                       std::mt19937_64& rng);

/// Rough level masked to indices [lo, hi].
LevelField localized_level(const NoiseTree& tree, std::size_t level, std::size_t M,
                           std::size_t lo, std::size_t hi, std::mt19937_64& rng);

/// Same smooth profile replicated across a level.
LevelField smooth_level(const NoiseTree& tree, std::size_t level, std::size_t M,
                        std::mt19937_64& rng);

}  // namespace fields

}  // namespace spc
