#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace spc {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// G1 not strictly inside G0, or G0 touches the boundary of (0,1).
struct NestedRegionViolation : Error { using Error::Error; };

/// A region contains no strictly interior grid node.
struct TooCoarse : Error { using Error::Error; };

/// Diffusion coefficient not uniformly positive on the evaluation grid.
struct EllipticityViolation : Error { using Error::Error; };

/// An operation that divides by a field norm received the zero field.
struct ZeroField : Error { using Error::Error; };

/// Scenario tree depth outside the supported range.
struct DepthTooLarge : Error { using Error::Error; };

/// A level-indexed field was paired with data of the wrong level size.
struct LevelMismatch : Error { using Error::Error; };

/// The interior maximum of the spatial weight profile lies outside G1.
struct ArgmaxOutsideG1 : Error { using Error::Error; };

/// Unregularized weights evaluated at t = 0 or t = T.
struct TimeOnBoundary : Error { using Error::Error; };

/// A linear solve failed (singular or numerically unstable pivot).
struct SolverFailure : Error { using Error::Error; };

/// Conjugate gradients hit the iteration cap before reaching tolerance.
struct CgStalled : Error {
  CgStalled(const std::string& what, std::vector<double> history)
      : Error(what), residual_history(std::move(history)) {}
  std::vector<double> residual_history;
};

/// Configuration failed validation; message lists field-level problems.
struct ConfigInvalid : Error { using Error::Error; };

}  // namespace spc
