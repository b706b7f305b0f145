#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace spc {

/// Flat key=value configuration with dotted keys.
///
/// File format: one `key = value` per line; `#` starts a comment; values may
/// be space-separated lists; duplicate keys are an error. Reads are tracked
/// so a run can reject keys it never consumed (typo protection).
class ConfigMap {
 public:
  static ConfigMap from_file(const std::string& path);
  static ConfigMap from_text(const std::string& text);

  /// Apply a `key=value` override (the --set flag); replaces or inserts.
  void set(const std::string& assignment);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::vector<double> get_list(const std::string& key,
                               const std::vector<double>& fallback) const;

  /// Throw ConfigInvalid listing every key that was never read.
  void reject_unknown_keys() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> read_;
};

struct RunOutput {
  std::string experiment_id;  // <kind>-<seed>
  std::string record_path;    // structured record (JSON)
  std::string csv_path;       // flat per-row table
  std::vector<std::string> diagnostics;
};

/// Execute the experiment selected by cfg["kind"], writing
/// <id>.csv and <id>.record.json into out_dir. CSV rows are flushed as they
/// are produced, so a failing solve leaves the partial table behind.
/// Configuration problems throw ConfigInvalid; numerical failures propagate
/// as SolverFailure / CgStalled.
///
/// Kinds: control-forward, control-backward, carleman-backward,
/// carleman-forward, observability-forward, observability-backward,
/// oracle-check, ito-check, weighted-hum-A, weighted-hum-B.
RunOutput run_experiment(const ConfigMap& cfg, const std::string& out_dir);

/// Extract a long-format plot table from run records. Kinds:
///   terminal-vs-epsilon        (control-* records)
///   carleman-ratio-vs-lambda   (carleman-* records)
///   observability-vs-coefficient (observability-* records)
///   cost-vs-exponent           (control-* records)
/// Records of other kinds are skipped, so a whole directory can be globbed.
/// Writes plot_<kind>.csv with columns
/// experiment_id,x_name,x_value,y_name,y_value and returns its path.
std::string emit_plot_data(const std::vector<std::string>& record_paths,
                           const std::string& kind, const std::string& out_dir);

}  // namespace spc
