#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "survhte/harness.hpp"
#include "survhte/null_constants.hpp"

using namespace survhte;

namespace {

int cmd_run(const std::string& config_path, const std::string& profile, std::size_t workers,
            const std::string& output_dir) {
  harness::ExperimentConfig cfg;
  try {
    cfg = harness::load_config(config_path, harness::parse_profile(profile));
    if (workers > 0) cfg.workers = workers;
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    cfg.validate();
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  try {
    const auto summary = harness::run(cfg, &std::cerr);
    std::cerr << summary.rows << " result rows, " << summary.failures << " failed of " << summary.attempted << '\n';
    return summary.all_failed() ? 3 : 0;
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
}

int cmd_aggregate(const std::string& in_path, const std::string& out_path) {
  std::ifstream in(in_path);
  if (!in) {
    std::cerr << "cannot read " << in_path << '\n';
    return 2;
  }
  try {
    const auto rows = harness::aggregate(in);
    std::ofstream out(out_path);
    if (!out) {
      std::cerr << "cannot write " << out_path << '\n';
      return 2;
    }
    harness::write_aggregate_csv(rows, out);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  return 0;
}

int cmd_truth_oracle(const std::string& family, int dgp, bool null_hte, std::size_t n_mc, std::uint64_t seed) {
  DgpSpec spec;
  try {
    spec = DgpSpec::make(parse_family(family), dgp, 1, seed, null_hte);
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }
  const auto rows = harness::truth_oracle_table(spec, n_mc, seed);
  std::cout << spec.label() << "  n_mc=" << n_mc << "  seed=" << seed << '\n';
  std::cout << std::setw(6) << "probe" << std::setw(14) << "analytic" << std::setw(14) << "monte_carlo"
            << std::setw(12) << "se" << std::setw(9) << "z" << '\n';
  std::cout << std::fixed;
  for (const auto& r : rows) {
    std::cout << std::setw(6) << r.probe << std::setw(14) << std::setprecision(6) << r.analytic << std::setw(14)
              << r.monte_carlo << std::setw(12) << r.se << std::setw(9) << std::setprecision(2)
              << (r.monte_carlo - r.analytic) / r.se << '\n';
  }
  return 0;
}

int cmd_null_table(std::size_t draws, std::uint64_t seed) {
  std::cout << "// draws=" << draws << " seed=" << seed << "\n{{\n";
  for (auto family : {Family::Henderson, Family::Cui, Family::Hu}) {
    std::cout << "    {";
    for (int dgp = 1; dgp <= 4; ++dgp)
      std::cout << (dgp > 1 ? ", " : "") << format_double(compute_null_constant(family, dgp, draws, seed));
    std::cout << "},  // " << to_string(family) << '\n';
  }
  std::cout << "}}\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Survival treatment-effect simulation lab"};
  app.require_subcommand(1);

  std::string config, profile = "desk", output_dir;
  std::size_t workers = 0;
  auto* run = app.add_subcommand("run", "Run the replication study");
  run->add_option("--config", config, "Config file")->required()->check(CLI::ExistingFile);
  run->add_option("--profile", profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  run->add_option("--workers", workers, "Concurrent replications (overrides config)");
  run->add_option("--output-dir", output_dir, "Output directory (overrides config)");

  std::string in_path, out_path = "aggregate.csv";
  auto* agg = app.add_subcommand("aggregate", "Summarise results.csv");
  agg->add_option("--in", in_path, "results.csv")->required();
  agg->add_option("--out", out_path, "aggregate.csv");

  std::string family;
  int dgp = 1;
  bool null_hte = false;
  std::size_t n_mc = 1000000;
  std::uint64_t seed = 7;
  auto* oracle = app.add_subcommand("truth-oracle", "Analytic vs Monte-Carlo theta at frozen probes");
  oracle->add_option("--family", family, "henderson, cui or hu")
      ->required()
      ->check(CLI::IsMember({"henderson", "cui", "hu"}));
  oracle->add_option("--dgp", dgp, "Design index")->check(CLI::Range(1, 4));
  oracle->add_flag("--null", null_hte, "Null-HTE variant");
  oracle->add_option("--nmc", n_mc, "Monte-Carlo draws per arm")->check(CLI::Range(std::size_t{100000}, SIZE_MAX));
  oracle->add_option("--seed", seed, "Seed");

  std::size_t draws = null_constants::kDraws;
  std::uint64_t table_seed = null_constants::kSeed;
  auto* table = app.add_subcommand("null-table", "Recompute the null-variant effect constants");
  table->add_option("--draws", draws, "Covariate draws");
  table->add_option("--seed", table_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (*run) return cmd_run(config, profile, workers, output_dir);
  if (*agg) return cmd_aggregate(in_path, out_path);
  if (*oracle) return cmd_truth_oracle(family, dgp, null_hte, n_mc, seed);
  return cmd_null_table(draws, table_seed);
}
