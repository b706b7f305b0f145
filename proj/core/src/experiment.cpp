#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spcontrol/errors.hpp"
#include "spcontrol/estimates.hpp"
#include "spcontrol/experiment.hpp"
#include "spcontrol/grid.hpp"
#include "spcontrol/hum.hpp"
#include "spcontrol/kkt_oracle.hpp"
#include "spcontrol/noise.hpp"
#include "spcontrol/spde.hpp"
#include "spcontrol/weights.hpp"

namespace spc {
namespace {

using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------- csv ----

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Flushes after every row so aborted runs keep their partial table.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns)
      : out_(path, std::ios::binary), width_(columns.size()) {
    if (!out_) throw ConfigInvalid("cannot open output file: " + path);
    row(columns);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_)
      throw ConfigInvalid("csv row width does not match the header");
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) line += ',';
      line += csv_quote(cells[i]);
    }
    line += '\n';
    out_ << line;
    out_.flush();
  }

  static std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string integer(std::size_t v) { return std::to_string(v); }

 private:
  std::ofstream out_;
  std::size_t width_;
};

// -------------------------------------------------------------- setup ----

const std::vector<std::string>& known_kinds() {
  static const std::vector<std::string> kinds = {
      "control-forward",       "control-backward",      "carleman-backward",
      "carleman-forward",      "observability-forward", "observability-backward",
      "oracle-check",          "ito-check",             "weighted-hum-A",
      "weighted-hum-B"};
  return kinds;
}

Coefficient parse_coefficient(const ConfigMap& cfg, const std::string& key,
                              double T, double fallback) {
  if (!cfg.has(key)) return Coefficient{fallback};
  std::istringstream in(cfg.get_string(key, ""));
  std::vector<std::string> tok;
  std::string t;
  while (in >> t) tok.push_back(t);
  auto number = [&](const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
      throw ConfigInvalid("coefficient '" + key + "': bad number '" + s + "'");
    return v;
  };
  if (tok.size() == 1) return Coefficient{number(tok[0])};
  if (tok.size() >= 3 && tok[0] == "table") {
    const auto nt = static_cast<std::size_t>(number(tok[1]));
    const auto nx = static_cast<std::size_t>(number(tok[2]));
    std::vector<double> values;
    for (std::size_t i = 3; i < tok.size(); ++i) values.push_back(number(tok[i]));
    if (values.size() != nt * nx)
      throw ConfigInvalid("coefficient '" + key + "': table needs nt*nx values");
    return Coefficient::table(T, nt, nx, values);
  }
  throw ConfigInvalid("coefficient '" + key +
                      "': expected a number or 'table nt nx values...'");
}

struct Setup {
  std::string kind;
  std::uint64_t seed = 1;
  SpatialGrid grid;
  NoiseTree tree;
  CoefficientSet coeffs;
  double mu = 1.0;
  double c_cal = 1.0;
  HumConfig hum;
  std::vector<double> eps_list;
  WeightedHumConfig whum;
  std::vector<double> weighted_lambdas;
  std::vector<double> lambda_factors;
  std::optional<WeightFamily> wf;

  const WeightFamily& weights() const {
    if (!wf) throw ConfigInvalid("experiment kind needs the weight family");
    return *wf;
  }
};

Setup build_setup(const ConfigMap& cfg) {
  Setup s;
  s.kind = cfg.get_string("kind", "");
  if (s.kind.empty()) throw ConfigInvalid("config needs an experiment kind");
  const auto& kinds = known_kinds();
  if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end()) {
    std::string all;
    for (const auto& k : kinds) all += (all.empty() ? "" : ", ") + k;
    throw ConfigInvalid("unknown experiment kind '" + s.kind + "'; expected one of " + all);
  }
  s.seed = cfg.get_size("seed", 1);

  const auto M = cfg.get_size("geometry.M", 64);
  const auto g0 = cfg.get_list("geometry.g0", {0.25, 0.5});
  const auto g1 = cfg.get_list("geometry.g1", {0.3, 0.45});
  if (g0.size() != 2 || g1.size() != 2)
    throw ConfigInvalid("geometry.g0 and geometry.g1 need two entries: lo hi");
  const double psi_a = cfg.get_double("geometry.psi_a", 3.0);
  const double psi_b = cfg.get_double("geometry.psi_b", 5.0);
  s.grid = build_grid(M, {g0[0], g0[1]}, {g1[0], g1[1]});

  const auto L = cfg.get_size("noise.L", 6);
  const double T = cfg.get_double("noise.T", 1.0);
  s.tree = build_tree(L, T);

  s.coeffs.a = parse_coefficient(cfg, "coefficients.a", T, 1.0);
  s.coeffs.a1 = parse_coefficient(cfg, "coefficients.a1", T, 0.0);
  s.coeffs.a2 = parse_coefficient(cfg, "coefficients.a2", T, 0.0);
  s.coeffs.B1 = parse_coefficient(cfg, "coefficients.B1", T, 0.0);
  s.coeffs.B2 = parse_coefficient(cfg, "coefficients.B2", T, 0.0);
  s.coeffs.B = parse_coefficient(cfg, "coefficients.B", T, 0.0);
  s.coeffs.beta = parse_coefficient(cfg, "coefficients.beta", T, 0.0);
  s.coeffs.c0 = cfg.get_double("coefficients.c0", 0.0);

  s.mu = cfg.get_double("weights.mu", 1.0);
  s.c_cal = cfg.get_double("weights.c_cal", 1.0);

  s.eps_list = cfg.get_list("hum.epsilon", {1e-1, 1e-2, 1e-3, 1e-4});
  s.hum.cg_tol = cfg.get_double("hum.cg_tol", 1e-8);
  s.hum.cg_max_iters = cfg.get_size("hum.cg_max_iters", 400);
  s.hum.c_cal = s.c_cal;
  for (double e : s.eps_list)
    if (!(e > 0.0)) throw ConfigInvalid("hum.epsilon entries must be positive");

  s.weighted_lambdas = cfg.get_list("weighted.lambda", {1.0, 2.0, 4.0});
  s.whum.epsilon = cfg.get_double("weighted.epsilon", 0.5);
  s.whum.cg_tol = cfg.get_double("weighted.cg_tol", 1e-10);
  s.whum.cg_max_iters = cfg.get_size("weighted.cg_max_iters", 600);

  s.lambda_factors = cfg.get_list("carleman.lambda_factors", {1.0, 1.5, 2.0, 3.0, 4.0});

  const bool needs_weights = s.kind == "carleman-backward" ||
                             s.kind == "carleman-forward" ||
                             s.kind == "weighted-hum-A" ||
                             s.kind == "weighted-hum-B" || s.kind == "oracle-check";
  if (needs_weights)
    s.wf = make_weights(build_psi(s.grid, psi_a, psi_b), s.mu, T);
  return s;
}

// --------------------------------------------------------- generators ----

std::vector<double> profile_sample(const std::string& name, const SpatialGrid& grid,
                                   const NoiseTree& tree, std::mt19937_64& rng) {
  if (name == "zero") return std::vector<double>(grid.M, 0.0);
  if (name == "sin-bump") {
    std::vector<double> v(grid.M);
    for (std::size_t i = 0; i < grid.M; ++i)
      v[i] = std::sin(std::numbers::pi * grid.node(i));
    return v;
  }
  if (name == "smooth") return fields::smooth_profile(grid.M, rng);
  if (name == "rough") return fields::rough_level(tree, 0, grid.M, rng).values;
  if (name == "localized")
    return fields::localized_level(tree, 0, grid.M, grid.g0_range.lo,
                                   grid.g0_range.hi, rng)
        .values;
  throw ConfigInvalid("unknown data generator: " + name);
}

LevelField leaf_sample(const std::string& name, const SpatialGrid& grid,
                       const NoiseTree& tree, std::mt19937_64& rng) {
  const std::size_t L = tree.L;
  if (name == "zero" || name == "sin-bump") {
    LevelField f{L, grid.M,
                 std::vector<double>(tree.nodes_at(L) * grid.M, 0.0)};
    if (name == "sin-bump") {
      std::mt19937_64 unused(0);
      const auto p = profile_sample(name, grid, tree, unused);
      for (std::size_t n = 0; n < tree.nodes_at(L); ++n)
        std::copy(p.begin(), p.end(), f.at(n).begin());
    }
    return f;
  }
  if (name == "smooth") return fields::smooth_level(tree, L, grid.M, rng);
  if (name == "rough") return fields::rough_level(tree, L, grid.M, rng);
  if (name == "localized")
    return fields::localized_level(tree, L, grid.M, grid.g0_range.lo,
                                   grid.g0_range.hi, rng);
  throw ConfigInvalid("unknown data generator: " + name);
}

AdaptedField adapted_sample(const std::string& name, const NoiseTree& tree,
                            std::size_t levels, std::size_t width,
                            std::mt19937_64& rng) {
  AdaptedField f(tree, levels, width);
  if (name == "zero") return f;
  for (std::size_t k = 0; k < levels; ++k) {
    LevelField lf;
    if (name == "smooth")
      lf = fields::smooth_level(tree, k, width, rng);
    else if (name == "rough")
      lf = fields::rough_level(tree, k, width, rng);
    else
      throw ConfigInvalid("unknown data generator: " + name);
    f.level_data(k) = std::move(lf.values);
  }
  return f;
}

const char* mixed_name(std::size_t i) {
  switch (i % 3) {
    case 0: return "smooth";
    case 1: return "rough";
    default: return "localized";
  }
}

// ------------------------------------------------------------ helpers ----

double max_field_diff(const AdaptedField& a, const AdaptedField& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.levels(); ++k) {
    const auto& x = a.level_data(k);
    const auto& y = b.level_data(k);
    for (std::size_t j = 0; j < x.size(); ++j)
      m = std::max(m, std::abs(x[j] - y[j]));
  }
  return m;
}

void add_unique(std::vector<std::string>& all, const std::vector<std::string>& more) {
  for (const auto& d : more)
    if (std::find(all.begin(), all.end(), d) == all.end()) all.push_back(d);
}

CoefficientSet with_constant(CoefficientSet base, const std::string& name, double v) {
  const Coefficient c{v};
  if (name == "a1")
    base.a1 = c;
  else if (name == "a2")
    base.a2 = c;
  else if (name == "B1")
    base.B1 = c;
  else if (name == "B2")
    base.B2 = c;
  else if (name == "B")
    base.B = c;
  else if (name == "beta")
    base.beta = c;
  else
    throw ConfigInvalid("sweep.coefficient must be one of a1, a2, B1, B2, B, beta");
  return base;
}

double leaf_energy(const SpatialGrid& grid, const NoiseTree& tree,
                   const LevelField& f) {
  double e = 0.0;
  for (std::size_t n = 0; n < tree.nodes_at(tree.L); ++n)
    e += grid.inner(f.at(n), f.at(n));
  return e * tree.prob(tree.L);
}

// ------------------------------------------------------------ runners ----

void run_control(const Setup& s, const ConfigMap& cfg, const std::string& csv_path,
                 json& report, std::vector<std::string>& diagnostics) {
  const bool forward = s.kind == "control-forward";
  const std::string data_key = forward ? "data.y0" : "data.yT";
  const std::string data_name =
      cfg.get_string(data_key, forward ? "sin-bump" : "rough");
  cfg.reject_unknown_keys();

  std::mt19937_64 rng(s.seed);
  const auto form = forward ? CoeffForm::NonDivergence : CoeffForm::Divergence;
  const SchemeWorkspace ws = build_workspace(s.grid, s.tree, s.coeffs, form, true);

  CsvWriter csv(csv_path,
                {"epsilon", "iterations", "data_sq", "terminal_sq", "eps_sq_dual",
                 "terminal_ratio", "cost_u", "cost_v", "identity_gap",
                 "duality_residual", "exponent", "cost_bound"});

  std::vector<double> y0;
  LevelField yT;
  if (forward)
    y0 = profile_sample(data_name, s.grid, s.tree, rng);
  else
    yT = leaf_sample(data_name, s.grid, s.tree, rng);

  json eps_arr = json::array(), term_arr = json::array(), cost_arr = json::array();
  json cu_arr = json::array(), cv_arr = json::array(), it_arr = json::array();
  json gap_arr = json::array(), dual_arr = json::array(), ratio_arr = json::array();
  double data_sq = 0.0, exponent = 0.0, cost_bound = 0.0;

  for (double eps : s.eps_list) {
    HumConfig h = s.hum;
    h.epsilon = eps;
    const HumResult res = forward ? solve_hum_forward(ws, y0, h)
                                  : solve_hum_backward(ws, yT, h);
    double dual_sq = 0.0;
    if (forward) {
      for (std::size_t n = 0; n < s.tree.nodes_at(s.tree.L); ++n)
        dual_sq += s.grid.inner(res.dual_leaf.at(n), res.dual_leaf.at(n));
      dual_sq *= s.tree.prob(s.tree.L);
    } else {
      dual_sq = s.grid.inner(res.dual_root, res.dual_root);
    }
    const double eps_sq_dual = eps * eps * dual_sq;
    const double ratio = res.data_sq > 0.0 ? res.terminal_sq / res.data_sq : 0.0;
    csv.row({CsvWriter::num(eps), CsvWriter::integer(res.iterations),
             CsvWriter::num(res.data_sq), CsvWriter::num(res.terminal_sq),
             CsvWriter::num(eps_sq_dual), CsvWriter::num(ratio),
             CsvWriter::num(res.cost_u), CsvWriter::num(res.cost_v),
             CsvWriter::num(res.identity_gap), CsvWriter::num(res.duality_residual),
             CsvWriter::num(res.exponent), CsvWriter::num(res.cost_bound)});
    eps_arr.push_back(eps);
    term_arr.push_back(res.terminal_sq);
    cost_arr.push_back(res.cost_u + res.cost_v);
    cu_arr.push_back(res.cost_u);
    cv_arr.push_back(res.cost_v);
    it_arr.push_back(res.iterations);
    gap_arr.push_back(res.identity_gap);
    dual_arr.push_back(res.duality_residual);
    ratio_arr.push_back(ratio);
    data_sq = res.data_sq;
    exponent = res.exponent;
    cost_bound = res.cost_bound;
    add_unique(diagnostics, res.state.diagnostics);
  }
  report["data_sq"] = data_sq;
  report["exponent"] = exponent;
  report["cost_bound"] = cost_bound;
  report["epsilon"] = eps_arr;
  report["terminal_sq"] = term_arr;
  report["total_cost"] = cost_arr;
  report["cost_u"] = cu_arr;
  report["cost_v"] = cv_arr;
  report["iterations"] = it_arr;
  report["identity_gap"] = gap_arr;
  report["duality_residual"] = dual_arr;
  report["terminal_ratio"] = ratio_arr;
}

void run_ito_check(const Setup& s, const ConfigMap& cfg, const std::string& csv_path,
                   json& report, std::vector<std::string>& diagnostics) {
  const std::size_t count = cfg.get_size("ensemble.size", 20);
  cfg.reject_unknown_keys();
  if (count == 0) throw ConfigInvalid("ensemble.size must be positive");

  std::mt19937_64 rng(s.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  CsvWriter csv(csv_path, {"instance", "form", "residual"});
  json residuals = json::array();
  double worst = 0.0;
  const std::size_t L = s.tree.L, M = s.grid.M;

  for (std::size_t i = 0; i < count; ++i) {
    CoefficientSet c;
    c.a = Coefficient{draw(0.5, 2.0)};
    c.a1 = Coefficient{draw(-1.0, 1.0)};
    c.a2 = Coefficient{draw(-1.0, 1.0)};
    c.B1 = Coefficient{draw(-0.5, 0.5)};
    c.B2 = Coefficient{draw(-0.5, 0.5)};
    c.B = Coefficient{draw(-0.5, 0.5)};
    c.beta = Coefficient{draw(0.0, 1.0)};
    const bool divergence = (i % 2) == 1;
    const auto form = divergence ? CoeffForm::Divergence : CoeffForm::NonDivergence;
    const SchemeWorkspace ws = build_workspace(s.grid, s.tree, c, form, true);

    const AdaptedField g = adapted_sample("rough", s.tree, L, M, rng);
    const AdaptedField q = adapted_sample("rough", s.tree, L, M, rng);
    const AdaptedField sigma = adapted_sample("rough", s.tree, L, M, rng);

    AdaptedField y(s.tree, L + 1, M);
    const auto y0 = profile_sample("smooth", s.grid, s.tree, rng);
    std::copy(y0.begin(), y0.end(), y.at(0, 0).begin());
    forward_sweep(ws, y, &g, &q);

    AdaptedField z(s.tree, L + 1, M), zbar(s.tree, L, M), zhat(s.tree, L, M);
    z.level_data(L) = leaf_sample("rough", s.grid, s.tree, rng).values;
    backward_sweep(ws, z, zbar, zhat, &sigma);

    const double r = ito_duality_residual(s.tree, s.grid.quad_w, y, z, zbar, zhat,
                                          &g, &q, &sigma);
    worst = std::max(worst, r);
    residuals.push_back(r);
    csv.row({CsvWriter::integer(i), divergence ? "divergence" : "non-divergence",
             CsvWriter::num(r)});
  }
  report["instances"] = count;
  report["max_residual"] = worst;
  report["residual"] = residuals;
  (void)diagnostics;
}

void run_oracle_check(const Setup& s, const ConfigMap& cfg,
                      const std::string& csv_path, json& report,
                      std::vector<std::string>& diagnostics) {
  const std::string zname = cfg.get_string("data.z", "smooth");
  cfg.reject_unknown_keys();

  std::mt19937_64 rng(s.seed);
  HumConfig h = s.hum;
  h.epsilon = s.eps_list.front();
  WeightedHumConfig wh = s.whum;
  wh.lambda = s.weighted_lambdas.front();

  CsvWriter csv(csv_path, {"variant", "max_control_diff", "oracle_residual",
                           "iterations", "oracle_objective"});
  json variants = json::object();
  double overall = 0.0;

  auto emit = [&](const std::string& name, double diff, double resid,
                  std::size_t iters, double oracle_obj, double cg_obj) {
    csv.row({name, CsvWriter::num(diff), CsvWriter::num(resid),
             CsvWriter::integer(iters), CsvWriter::num(oracle_obj)});
    json v;
    v["max_control_diff"] = diff;
    v["oracle_residual"] = resid;
    v["iterations"] = iters;
    v["oracle_objective"] = oracle_obj;
    if (std::isfinite(cg_obj)) v["cg_objective"] = cg_obj;
    variants[name] = v;
    overall = std::max(overall, diff);
  };

  {  // forward pair, controls (u, v)
    const SchemeWorkspace ws =
        build_workspace(s.grid, s.tree, s.coeffs, CoeffForm::NonDivergence, true);
    const auto y0 = profile_sample("smooth", s.grid, s.tree, rng);
    const HumResult res = solve_hum_forward(ws, y0, h);
    const OracleResult orc = kkt_oracle_forward(ws, y0, h);
    const double diff =
        std::max(max_field_diff(res.u, orc.u), max_field_diff(res.v, orc.v));
    const double cg_obj = 0.5 * (res.cost_u + res.cost_v) +
                          res.terminal_sq / (2.0 * h.epsilon);
    emit("forward", diff, orc.max_equation_residual, res.iterations,
         orc.objective, cg_obj);
    add_unique(diagnostics, res.state.diagnostics);
  }
  {  // backward pair, control u
    const SchemeWorkspace ws =
        build_workspace(s.grid, s.tree, s.coeffs, CoeffForm::Divergence, true);
    const LevelField yT = leaf_sample("rough", s.grid, s.tree, rng);
    const HumResult res = solve_hum_backward(ws, yT, h);
    const OracleResult orc = kkt_oracle_backward(ws, yT, h);
    const double diff = max_field_diff(res.u, orc.u);
    const double cg_obj = 0.5 * res.cost_u + res.terminal_sq / (2.0 * h.epsilon);
    emit("backward", diff, orc.max_equation_residual, res.iterations,
         orc.objective, cg_obj);
    add_unique(diagnostics, res.state.diagnostics);
  }
  CoefficientSet bare;
  bare.a = s.coeffs.a;
  bare.c0 = s.coeffs.c0;
  const SchemeWorkspace ws_bare =
      build_workspace(s.grid, s.tree, bare, CoeffForm::None, false);
  {  // weighted forward functional
    const AdaptedField z = adapted_sample(zname, s.tree, s.tree.L, s.grid.M, rng);
    const WeightedHumResult res =
        solve_weighted_hum_forward(ws_bare, s.weights(), z, wh);
    const OracleResult orc = kkt_oracle_weighted_forward(ws_bare, s.weights(), z, wh);
    const double diff =
        std::max(max_field_diff(res.u, orc.u), max_field_diff(res.v, orc.v));
    emit("weighted-A", diff, orc.max_equation_residual, res.iterations,
         orc.objective, std::numeric_limits<double>::quiet_NaN());
  }
  {  // weighted backward functional
    const AdaptedField z = adapted_sample(zname, s.tree, s.tree.L, s.grid.M, rng);
    const WeightedHumResult res =
        solve_weighted_hum_backward(ws_bare, s.weights(), z, wh);
    const OracleResult orc = kkt_oracle_weighted_backward(ws_bare, s.weights(), z, wh);
    const double diff = max_field_diff(res.u, orc.u);
    emit("weighted-B", diff, orc.max_equation_residual, res.iterations,
         orc.objective, std::numeric_limits<double>::quiet_NaN());
  }
  report["max_control_diff"] = overall;
  report["variants"] = variants;
}

void run_carleman(const Setup& s, const ConfigMap& cfg, const std::string& csv_path,
                  json& report, std::vector<std::string>& diagnostics) {
  const bool backward = s.kind == "carleman-backward";
  const std::size_t count = cfg.get_size("ensemble.size", 20);
  cfg.reject_unknown_keys();
  if (count == 0) throw ConfigInvalid("ensemble.size must be positive");

  const auto form = backward ? CoeffForm::NonDivergence : CoeffForm::Divergence;
  const SchemeWorkspace ws = build_workspace(s.grid, s.tree, s.coeffs, form, true);
  const LambdaThreshold thr =
      backward ? lambda_threshold_backward(ws.norms, s.tree.T, s.c_cal)
               : lambda_threshold_forward(ws.norms, s.tree.T, s.c_cal);
  std::vector<double> lambdas;
  for (double f : s.lambda_factors) lambdas.push_back(f * thr.value);

  std::mt19937_64 rng(s.seed);
  CsvWriter csv(csv_path,
                {"sample", "lambda", "threshold", "ratio", "log_lhs", "log_rhs",
                 "log_lhs_interior", "log_lhs_grad", "log_lhs_trace",
                 "log_rhs_local", "log_rhs_drift", "log_rhs_boundary",
                 "log_rhs_div", "log_rhs_noise", "log_noise_phi3"});

  std::vector<CarlemanReport> reports;
  const std::size_t L = s.tree.L, M = s.grid.M;
  for (std::size_t i = 0; i < count; ++i) {
    SolutionBundle b;
    SourceSpec sources;
    if (backward) {
      b.state = AdaptedField(s.tree, L + 1, M);
      b.mean_half = AdaptedField(s.tree, L, M);
      b.mart_half = AdaptedField(s.tree, L, M);
      b.state.level_data(L) = leaf_sample(mixed_name(i), s.grid, s.tree, rng).values;
      backward_sweep(ws, b.state, b.mean_half, b.mart_half, nullptr);
      sources = substitution_backward(s.grid, s.tree, s.coeffs, b.state, b.mart_half);
    } else {
      b.state = AdaptedField(s.tree, L + 1, M);
      const auto z0 = profile_sample(mixed_name(i), s.grid, s.tree, rng);
      std::copy(z0.begin(), z0.end(), b.state.at(0, 0).begin());
      forward_sweep(ws, b.state, nullptr, nullptr);
      sources = substitution_forward(s.grid, s.tree, s.coeffs, b.state);
    }
    const CarlemanReport rep =
        backward ? carleman_eval_backward(ws, b, sources, s.weights(), lambdas)
                 : carleman_eval_forward(ws, b, sources, s.weights(), lambdas);
    for (std::size_t j = 0; j < lambdas.size(); ++j)
      csv.row({CsvWriter::integer(i), CsvWriter::num(lambdas[j]),
               CsvWriter::num(rep.threshold.value), CsvWriter::num(rep.ratio[j]),
               CsvWriter::num(rep.log_lhs[j]), CsvWriter::num(rep.log_rhs[j]),
               CsvWriter::num(rep.log_lhs_interior[j]),
               CsvWriter::num(rep.log_lhs_grad[j]),
               CsvWriter::num(rep.log_lhs_trace[j]),
               CsvWriter::num(rep.log_rhs_local[j]),
               CsvWriter::num(rep.log_rhs_drift[j]),
               CsvWriter::num(rep.log_rhs_boundary[j]),
               CsvWriter::num(rep.log_rhs_div[j]),
               CsvWriter::num(rep.log_rhs_noise[j]),
               CsvWriter::num(rep.log_noise_phi3[j])});
    add_unique(diagnostics, rep.diagnostics);
    reports.push_back(std::move(rep));
  }

  const CarlemanBatch batch = aggregate_reports(reports);
  json lam = json::array(), ratio = json::array(), lhs = json::array(),
       rhs = json::array(), absorption = json::array();
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    lam.push_back(batch.lambda_grid[j]);
    ratio.push_back(batch.ratio[j]);
    lhs.push_back(batch.log_lhs[j]);
    rhs.push_back(batch.log_rhs[j]);
    std::size_t pass = 0;
    for (const auto& rep : reports) {
      const auto checks = absorption_checks(rep, j, backward);
      const bool all = std::all_of(checks.begin(), checks.end(),
                                   [](const AbsorptionCheck& c) { return c.holds(); });
      if (all) ++pass;
    }
    absorption.push_back(pass);
  }
  report["samples"] = count;
  report["threshold"] = thr.value;
  report["lambda"] = lam;
  report["batch_ratio"] = ratio;
  report["batch_log_lhs"] = lhs;
  report["batch_log_rhs"] = rhs;
  report["ratio_min"] = batch.ratio_min;
  report["ratio_median"] = batch.ratio_median;
  report["ratio_max"] = batch.ratio_max;
  report["spread"] = batch.spread;
  report["absorption_pass"] = absorption;
}

void run_observability(const Setup& s, const ConfigMap& cfg,
                       const std::string& csv_path, json& report,
                       std::vector<std::string>& diagnostics) {
  const bool forward = s.kind == "observability-forward";
  const std::size_t count = cfg.get_size("ensemble.size", 100);
  const std::string sweep_coeff = cfg.get_string("sweep.coefficient", "");
  const std::vector<double> sweep_values =
      cfg.get_list("sweep.values", std::vector<double>{});
  cfg.reject_unknown_keys();
  if (!sweep_coeff.empty() && sweep_values.empty())
    throw ConfigInvalid("sweep.coefficient needs sweep.values");
  if (sweep_coeff.empty() && !sweep_values.empty())
    throw ConfigInvalid("sweep.values needs sweep.coefficient");

  CsvWriter csv(csv_path, {"sweep_value", "sample", "ratio"});
  json values = json::array(), fitted = json::array(), maxr = json::array(),
       medr = json::array(), minr = json::array(), expo = json::array();

  const bool sweeping = !sweep_coeff.empty();
  const std::vector<double> passes = sweeping ? sweep_values
                                              : std::vector<double>{0.0};
  for (double value : passes) {
    const CoefficientSet coeffs =
        sweeping ? with_constant(s.coeffs, sweep_coeff, value) : s.coeffs;
    const auto form = forward ? CoeffForm::NonDivergence : CoeffForm::Divergence;
    const SchemeWorkspace ws = build_workspace(s.grid, s.tree, coeffs, form, true);

    // Re-seed per sweep value so every pass sees the same ensemble.
    std::mt19937_64 rng(s.seed);
    ObservabilityReport rep;
    if (forward) {
      std::vector<LevelField> samples;
      for (std::size_t i = 0; i < count; ++i)
        samples.push_back(leaf_sample(mixed_name(i), s.grid, s.tree, rng));
      rep = observability_forward(ws, samples);
    } else {
      std::vector<std::vector<double>> samples;
      for (std::size_t i = 0; i < count; ++i)
        samples.push_back(profile_sample(mixed_name(i), s.grid, s.tree, rng));
      rep = observability_backward(ws, samples);
    }
    for (std::size_t i = 0; i < rep.ratios.size(); ++i)
      csv.row({CsvWriter::num(value), CsvWriter::integer(i),
               CsvWriter::num(rep.ratios[i])});
    values.push_back(value);
    fitted.push_back(rep.fitted_c);
    maxr.push_back(rep.max_ratio);
    medr.push_back(rep.median_ratio);
    minr.push_back(rep.min_ratio);
    expo.push_back(rep.exponent);
    add_unique(diagnostics, rep.diagnostics);
  }
  report["samples"] = count;
  report["sweep_coefficient"] = sweeping ? sweep_coeff : "none";
  report["sweep_values"] = values;
  report["fitted_c"] = fitted;
  report["max_ratio"] = maxr;
  report["median_ratio"] = medr;
  report["min_ratio"] = minr;
  report["exponent"] = expo;
}

void run_weighted_hum(const Setup& s, const ConfigMap& cfg,
                      const std::string& csv_path, json& report,
                      std::vector<std::string>& diagnostics) {
  const bool forward = s.kind == "weighted-hum-A";
  const std::string zname = cfg.get_string("data.z", "smooth");
  cfg.reject_unknown_keys();

  CoefficientSet bare;
  bare.a = s.coeffs.a;
  bare.c0 = s.coeffs.c0;
  const SchemeWorkspace ws =
      build_workspace(s.grid, s.tree, bare, CoeffForm::None, false);
  std::mt19937_64 rng(s.seed);
  const AdaptedField z = adapted_sample(zname, s.tree, s.tree.L, s.grid.M, rng);

  CsvWriter csv(csv_path,
                {"lambda", "iterations", "fitted_c", "identity_residual",
                 "penalty_sq", "log_lhs", "log_rhs", "log_lhs_u", "log_lhs_y",
                 "log_lhs_trace", "log_lhs_grad", "log_lhs_noise",
                 "log_rhs_interior", "log_rhs_trace"});
  json lam = json::array(), fit = json::array(), idres = json::array(),
       pen = json::array(), iters = json::array();

  for (double lambda : s.weighted_lambdas) {
    WeightedHumConfig wc = s.whum;
    wc.lambda = lambda;
    const WeightedHumResult res =
        forward ? solve_weighted_hum_forward(ws, s.weights(), z, wc)
                : solve_weighted_hum_backward(ws, s.weights(), z, wc);
    csv.row({CsvWriter::num(lambda), CsvWriter::integer(res.iterations),
             CsvWriter::num(res.fitted_c), CsvWriter::num(res.identity_residual),
             CsvWriter::num(res.penalty_sq), CsvWriter::num(res.log_lhs),
             CsvWriter::num(res.log_rhs), CsvWriter::num(res.log_lhs_u),
             CsvWriter::num(res.log_lhs_y), CsvWriter::num(res.log_lhs_trace),
             CsvWriter::num(res.log_lhs_grad), CsvWriter::num(res.log_lhs_noise),
             CsvWriter::num(res.log_rhs_interior), CsvWriter::num(res.log_rhs_trace)});
    lam.push_back(lambda);
    fit.push_back(res.fitted_c);
    idres.push_back(res.identity_residual);
    pen.push_back(res.penalty_sq);
    iters.push_back(res.iterations);
    add_unique(diagnostics, res.state.diagnostics);
  }
  report["lambda"] = lam;
  report["fitted_c"] = fit;
  report["identity_residual"] = idres;
  report["penalty_sq"] = pen;
  report["iterations"] = iters;
}

}  // namespace

RunOutput run_experiment(const ConfigMap& cfg, const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const Setup s = build_setup(cfg);
  const std::string id = s.kind + "-" + std::to_string(s.seed);

  std::filesystem::create_directories(out_dir);
  RunOutput out;
  out.experiment_id = id;
  out.csv_path = out_dir + "/" + id + ".csv";
  out.record_path = out_dir + "/" + id + ".record.json";

  json record;
  record["kind"] = s.kind;
  record["experiment_id"] = id;
  record["version"] = "0.1.0";
  json echo = json::object();
  for (const auto& kv : cfg.entries()) echo[kv.first] = kv.second;
  record["config"] = echo;

  json report = json::object();
  if (s.kind == "control-forward" || s.kind == "control-backward")
    run_control(s, cfg, out.csv_path, report, out.diagnostics);
  else if (s.kind == "ito-check")
    run_ito_check(s, cfg, out.csv_path, report, out.diagnostics);
  else if (s.kind == "oracle-check")
    run_oracle_check(s, cfg, out.csv_path, report, out.diagnostics);
  else if (s.kind == "carleman-backward" || s.kind == "carleman-forward")
    run_carleman(s, cfg, out.csv_path, report, out.diagnostics);
  else if (s.kind == "observability-forward" || s.kind == "observability-backward")
    run_observability(s, cfg, out.csv_path, report, out.diagnostics);
  else
    run_weighted_hum(s, cfg, out.csv_path, report, out.diagnostics);

  record["report"] = report;
  record["diagnostics"] = out.diagnostics;
  record["outputs"] = {{"csv", out.csv_path}};
  const auto dt = std::chrono::steady_clock::now() - t0;
  record["wall_time_ms"] =
      std::chrono::duration<double, std::milli>(dt).count();

  std::ofstream rec(out.record_path, std::ios::binary);
  if (!rec) throw ConfigInvalid("cannot open output file: " + out.record_path);
  rec << record.dump(2) << '\n';
  return out;
}

std::string emit_plot_data(const std::vector<std::string>& record_paths,
                           const std::string& kind, const std::string& out_dir) {
  const bool terminal = kind == "terminal-vs-epsilon";
  const bool carleman = kind == "carleman-ratio-vs-lambda";
  const bool observability = kind == "observability-vs-coefficient";
  const bool cost = kind == "cost-vs-exponent";
  if (!terminal && !carleman && !observability && !cost)
    throw ConfigInvalid(
        "unknown plot kind '" + kind +
        "'; expected terminal-vs-epsilon, carleman-ratio-vs-lambda, "
        "observability-vs-coefficient or cost-vs-exponent");

  std::filesystem::create_directories(out_dir);
  const std::string path = out_dir + "/plot_" + kind + ".csv";
  CsvWriter csv(path, {"experiment_id", "x_name", "x_value", "y_name", "y_value"});

  auto get_num = [](const json& j, double& out_v) {
    if (!j.is_number()) return false;
    out_v = j.get<double>();
    return true;
  };

  for (const auto& rp : record_paths) {
    std::ifstream in(rp);
    if (!in) throw ConfigInvalid("cannot open record file: " + rp);
    json r;
    try {
      in >> r;
    } catch (const json::exception& e) {
      throw ConfigInvalid("record file " + rp + " is not valid JSON: " + e.what());
    }
    const std::string rkind = r.value("kind", "");
    const std::string id = r.value("experiment_id", "");
    const json rep = r.value("report", json::object());
    auto is = [&](const char* prefix) { return rkind.rfind(prefix, 0) == 0; };

    auto pairs = [&](const char* xkey, const char* xname, const char* ykey,
                     const char* yname) {
      const json xs = rep.value(xkey, json::array());
      const json ys = rep.value(ykey, json::array());
      for (std::size_t j = 0; j < std::min(xs.size(), ys.size()); ++j) {
        double x, y;
        if (!get_num(xs[j], x) || !get_num(ys[j], y)) continue;
        csv.row({id, xname, CsvWriter::num(x), yname, CsvWriter::num(y)});
      }
    };

    if (terminal && is("control-"))
      pairs("epsilon", "epsilon", "terminal_sq", "terminal_sq");
    else if (carleman && is("carleman-"))
      pairs("lambda", "lambda", "batch_ratio", "batch_ratio");
    else if (observability && is("observability-"))
      pairs("sweep_values", "sweep_value", "fitted_c", "fitted_c");
    else if (cost && is("control-")) {
      const json eps = rep.value("epsilon", json::array());
      const json costs = rep.value("total_cost", json::array());
      double data_sq = 0.0, exponent = 0.0;
      if (!get_num(rep.value("data_sq", json()), data_sq) ||
          !get_num(rep.value("exponent", json()), exponent))
        continue;
      std::size_t best = eps.size();
      double best_eps = kInf;
      for (std::size_t j = 0; j < std::min(eps.size(), costs.size()); ++j) {
        double e;
        if (get_num(eps[j], e) && e < best_eps) {
          best_eps = e;
          best = j;
        }
      }
      if (best == eps.size()) continue;
      double c;
      if (!get_num(costs[best], c) || !(c > 0.0) || !(data_sq > 0.0)) continue;
      csv.row({id, "exponent", CsvWriter::num(exponent), "log_cost_ratio",
               CsvWriter::num(std::log(c / data_sq))});
    }
  }
  return path;
}

}  // namespace spc
