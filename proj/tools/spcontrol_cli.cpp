#include <glob.h>

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spcontrol/errors.hpp"
#include "spcontrol/experiment.hpp"

namespace {

// Bad inputs exit with 2, failures during a well-posed run with 3.
int classify(const spc::Error& e) {
  if (dynamic_cast<const spc::ConfigInvalid*>(&e) ||
      dynamic_cast<const spc::NestedRegionViolation*>(&e) ||
      dynamic_cast<const spc::TooCoarse*>(&e) ||
      dynamic_cast<const spc::DepthTooLarge*>(&e) ||
      dynamic_cast<const spc::ArgmaxOutsideG1*>(&e) ||
      dynamic_cast<const spc::EllipticityViolation*>(&e))
    return 2;
  return 3;
}

std::vector<std::string> expand_patterns(const std::vector<std::string>& patterns) {
  std::vector<std::string> files;
  for (const auto& p : patterns) {
    ::glob_t g{};
    const int rc = ::glob(p.c_str(), 0, nullptr, &g);
    if (rc == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) files.emplace_back(g.gl_pathv[i]);
    ::globfree(&g);
    if (rc != 0 && rc != GLOB_NOMATCH)
      throw spc::ConfigInvalid("cannot expand record pattern: " + p);
  }
  return files;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"null control experiments for stochastic parabolic equations"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_out = "out";
  std::vector<std::string> overrides;
  CLI::App* run = app.add_subcommand("run", "run one experiment from a config file");
  run->add_option("--config", config_path, "config file path")->required();
  run->add_option("--set", overrides, "override a config entry, key=value");
  run->add_option("--out", run_out, "output directory (default: out)");

  std::vector<std::string> patterns;
  std::string plot_kind;
  std::string plot_out = ".";
  CLI::App* plot =
      app.add_subcommand("plot-data", "extract a plot table from run records");
  plot->add_option("--records", patterns, "record file path or glob")->required();
  plot->add_option("--kind", plot_kind, "plot kind")->required();
  plot->add_option("--out", plot_out, "output directory (default: .)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) {
      spc::ConfigMap cfg = spc::ConfigMap::from_file(config_path);
      for (const auto& assignment : overrides) cfg.set(assignment);
      const spc::RunOutput out = spc::run_experiment(cfg, run_out);
      for (const auto& d : out.diagnostics) std::cerr << "note: " << d << '\n';
      std::cout << "wrote " << out.csv_path << '\n';
      std::cout << "wrote " << out.record_path << '\n';
    } else {
      const auto files = expand_patterns(patterns);
      const std::string path = spc::emit_plot_data(files, plot_kind, plot_out);
      std::cout << "wrote " << path << '\n';
    }
  } catch (const spc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return classify(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
