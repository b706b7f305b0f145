#include "spcontrol/noise.hpp"

#include <algorithm>
#include <cmath>

#include "spcontrol/linalg.hpp"

namespace spc {

NoiseTree build_tree(std::size_t L, double T) {
  if (L < 1 || L > 22) throw DepthTooLarge("tree depth must be in [1, 22]");
  if (!(T > 0.0)) throw DepthTooLarge("horizon T must be positive");
  NoiseTree t;
  t.L = L;
  t.T = T;
  t.dt = T / static_cast<double>(L);
  t.sqrt_dt = std::sqrt(t.dt);
  return t;
}

LevelField cond_expect(const NoiseTree& tree, const LevelField& f) {
  if (f.level == 0 || f.level > tree.L)
    throw LevelMismatch("cond_expect needs a level in [1, L]");
  if (f.values.size() != tree.nodes_at(f.level) * f.width)
    throw LevelMismatch("level field size does not match its level");
  LevelField out;
  out.level = f.level - 1;
  out.width = f.width;
  out.values.resize(tree.nodes_at(out.level) * f.width);
  for (std::size_t n = 0; n < tree.nodes_at(out.level); ++n) {
    auto a = f.at(2 * n);
    auto b = f.at(2 * n + 1);
    auto o = out.at(n);
    for (std::size_t i = 0; i < f.width; ++i) o[i] = 0.5 * (a[i] + b[i]);
  }
  return out;
}

LevelField martingale_part(const NoiseTree& tree, const LevelField& f) {
  if (f.level == 0 || f.level > tree.L)
    throw LevelMismatch("martingale_part needs a level in [1, L]");
  if (f.values.size() != tree.nodes_at(f.level) * f.width)
    throw LevelMismatch("level field size does not match its level");
  LevelField out;
  out.level = f.level - 1;
  out.width = f.width;
  out.values.resize(tree.nodes_at(out.level) * f.width);
  const double c = 1.0 / (2.0 * tree.sqrt_dt);
  for (std::size_t n = 0; n < tree.nodes_at(out.level); ++n) {
    auto a = f.at(2 * n);
    auto b = f.at(2 * n + 1);
    auto o = out.at(n);
    for (std::size_t i = 0; i < f.width; ++i) o[i] = c * (a[i] - b[i]);
  }
  return out;
}

std::vector<double> expectation(const NoiseTree& tree, const LevelField& f) {
  if (f.values.size() != tree.nodes_at(f.level) * f.width)
    throw LevelMismatch("level field size does not match its level");
  std::vector<double> out(f.width, 0.0);
  for (std::size_t n = 0; n < tree.nodes_at(f.level); ++n) {
    auto a = f.at(n);
    for (std::size_t i = 0; i < f.width; ++i) out[i] += a[i];
  }
  const double p = tree.prob(f.level);
  for (auto& v : out) v *= p;
  return out;
}

double expect_inner(const NoiseTree& tree, std::size_t level,
                    std::span<const double> w, const AdaptedField& a,
                    const AdaptedField& b) {
  double s = 0.0;
  for (std::size_t n = 0; n < tree.nodes_at(level); ++n)
    s += dot_weighted(w, a.at(level, n), b.at(level, n));
  return s * tree.prob(level);
}

double ito_duality_residual(const NoiseTree& tree, std::span<const double> mass,
                            const AdaptedField& y, const AdaptedField& z,
                            const AdaptedField& zbar, const AdaptedField& zhat,
                            const AdaptedField* g, const AdaptedField* q,
                            const AdaptedField* sigma) {
  const std::size_t L = tree.L;
  if (y.levels() != L + 1 || z.levels() != L + 1)
    throw LevelMismatch("state fields must span levels 0..L");
  if (zbar.levels() != L || zhat.levels() != L)
    throw LevelMismatch("predicted fields must span levels 0..L-1");

  const double lhs_T = expect_inner(tree, L, mass, y, z);
  const double lhs_0 = dot_weighted(mass, y.at(0, 0), z.at(0, 0));
  double rhs = 0.0;
  double scale = std::max(std::abs(lhs_T), std::abs(lhs_0));
  for (std::size_t k = 0; k < L; ++k) {
    double term = 0.0;
    if (g) term += expect_inner(tree, k, mass, *g, zbar);
    if (q) term += expect_inner(tree, k, mass, *q, zhat);
    if (sigma) term -= expect_inner(tree, k, mass, y, *sigma);
    rhs += tree.dt * term;
    scale = std::max(scale, tree.dt * std::abs(term));
  }
  const double res = std::abs(lhs_T - lhs_0 - rhs);
  return res / std::max(scale, 1e-300);
}

namespace fields {

std::vector<double> smooth_profile(std::size_t M, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double c0 = normal(rng);
  double cs[4], cc[4];
  for (int m = 0; m < 4; ++m) cs[m] = normal(rng);
  for (int m = 0; m < 4; ++m) cc[m] = normal(rng);
  std::vector<double> out(M);
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < M; ++i) {
    const double x = static_cast<double>(i) / static_cast<double>(M - 1);
    double v = c0;
    for (int m = 0; m < 4; ++m) {
      const double f = static_cast<double>(m + 1);
      v += cs[m] * std::sin(f * pi * x) / (f * f);
      v += cc[m] * std::cos(f * pi * x) / (f * f);
    }
    out[i] = v;
  }
  return out;
}

LevelField rough_level(const NoiseTree& tree, std::size_t level, std::size_t M,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  LevelField f;
  f.level = level;
  f.width = M;
  f.values.resize(tree.nodes_at(level) * M);
  for (auto& v : f.values) v = normal(rng);
  return f;
}

LevelField localized_level(const NoiseTree& tree, std::size_t level, std::size_t M,
                           std::size_t lo, std::size_t hi, std::mt19937_64& rng) {
  LevelField f = rough_level(tree, level, M, rng);
  for (std::size_t n = 0; n < tree.nodes_at(level); ++n) {
    auto row = f.at(n);
    for (std::size_t i = 0; i < M; ++i)
      if (i < lo || i > hi) row[i] = 0.0;
  }
  return f;
}

LevelField smooth_level(const NoiseTree& tree, std::size_t level, std::size_t M,
                        std::mt19937_64& rng) {
  const std::vector<double> p = smooth_profile(M, rng);
  LevelField f;
  f.level = level;
  f.width = M;
  f.values.resize(tree.nodes_at(level) * M);
  for (std::size_t n = 0; n < tree.nodes_at(level); ++n)
    std::copy(p.begin(), p.end(), f.at(n).begin());
  return f;
}

}  // namespace fields

}  // namespace spc
