#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "spcontrol/errors.hpp"

namespace spc {

/// Symmetric tridiagonal matrix stored as diagonal + one off-diagonal band.
/// Symmetry is structural: there is only one off-diagonal array, so the
/// matrix equals its transpose bit for bit.
struct TridiagSym {
  std::vector<double> diag;  // size n
  std::vector<double> off;   // size n-1, entry i couples rows i and i+1

  std::size_t size() const { return diag.size(); }

  /// y += c * (A x)
  void apply_add(std::span<const double> x, double c, std::span<double> y) const {
    const std::size_t n = diag.size();
    for (std::size_t i = 0; i < n; ++i) {
      double s = diag[i] * x[i];
      if (i > 0) s += off[i - 1] * x[i - 1];
      if (i + 1 < n) s += off[i] * x[i + 1];
      y[i] += c * s;
    }
  }
};

/// LU factorization of a general tridiagonal matrix with partial pivoting
/// (row swaps produce a second superdiagonal of fill-in). Deterministic and
/// stable for the indefinite time-step matrices that arise with negative
/// Robin coefficients.
class TridiagFactor {
 public:
  TridiagFactor() = default;

  /// Factor the matrix with subdiagonal a, diagonal b, superdiagonal c.
  TridiagFactor(std::span<const double> a, std::span<const double> b,
                std::span<const double> c) {
    factor(a, b, c);
  }

  /// Factor a symmetric tridiagonal matrix plus a diagonal shift:
  /// A = diag(shift) + T.
  static TridiagFactor shifted(const TridiagSym& t, std::span<const double> shift,
                               double scale) {
    const std::size_t n = t.size();
    std::vector<double> b(n);
    std::vector<double> a(n > 0 ? n - 1 : 0), c(n > 0 ? n - 1 : 0);
    for (std::size_t i = 0; i < n; ++i) b[i] = shift[i] + scale * t.diag[i];
    for (std::size_t i = 0; i + 1 < n; ++i) a[i] = c[i] = scale * t.off[i];
    return TridiagFactor(a, b, c);
  }

  void factor(std::span<const double> a, std::span<const double> b,
              std::span<const double> c) {
    n_ = b.size();
    d0_.assign(b.begin(), b.end());
    d1_.assign(n_, 0.0);
    d2_.assign(n_, 0.0);
    low_.assign(n_, 0.0);
    swap_.assign(n_, 0);
    for (std::size_t i = 0; i + 1 < n_; ++i) d1_[i] = c[i];

    std::vector<double> sub(a.begin(), a.end());
    for (std::size_t i = 0; i + 1 < n_; ++i) {
      double below = sub[i];
      if (std::abs(below) > std::abs(d0_[i])) {
        // Swap rows i and i+1.
        swap_[i] = 1;
        std::swap(d0_[i], below);
        double t1 = d1_[i];
        d1_[i] = d0_[i + 1];
        d0_[i + 1] = t1;
        if (i + 2 < n_) {
          d2_[i] = d1_[i + 1];
          d1_[i + 1] = 0.0;
        }
      }
      if (d0_[i] == 0.0) throw SolverFailure("tridiagonal factorization: zero pivot");
      const double m = below / d0_[i];
      low_[i] = m;
      d0_[i + 1] -= m * d1_[i];
      if (i + 2 < n_) {
        d1_[i + 1] -= m * d2_[i];
      }
    }
    if (n_ > 0 && d0_[n_ - 1] == 0.0)
      throw SolverFailure("tridiagonal factorization: zero pivot");
  }

  /// Solve A x = rhs in place.
  void solve(std::span<double> x) const {
    for (std::size_t i = 0; i + 1 < n_; ++i) {
      if (swap_[i]) std::swap(x[i], x[i + 1]);
      x[i + 1] -= low_[i] * x[i];
    }
    for (std::size_t ii = n_; ii-- > 0;) {
      double s = x[ii];
      if (ii + 1 < n_) s -= d1_[ii] * x[ii + 1];
      if (ii + 2 < n_) s -= d2_[ii] * x[ii + 2];
      x[ii] = s / d0_[ii];
    }
  }

  std::size_t size() const { return n_; }

 private:
  std::size_t n_ = 0;
  std::vector<double> low_, d0_, d1_, d2_;
  std::vector<int> swap_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Weighted inner product sum_i w_i a_i b_i.
inline double dot_weighted(std::span<const double> w, std::span<const double> a,
                           std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += w[i] * a[i] * b[i];
  return s;
}

}  // namespace spc
