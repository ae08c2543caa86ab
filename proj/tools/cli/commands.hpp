#pragma once

#include "cli/report.hpp"
#include "cli/run_config.hpp"

#include "flowproto/data.hpp"
#include "flowproto/hybrid.hpp"

#include <cstdint>
#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace flowproto::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitInternal = 1;

int exit_code_for(const std::exception& e);

// Where commands print manifests, summaries and eval rows (default std::cout);
// nullptr silences them.
void set_console(std::ostream* out);

/// Routes log output to standard error at `level` (error, info or debug).
/// Throws ConfigError for any other level.
void init_logging(const std::string& level);

struct ScenarioData {
  std::string id;  // name-mode
  ScenarioFamily family;

  const Dataset& train_for(int added) const;
};

/// Pool from Rng(seed), scenario split from Rng(seed, 1).
ScenarioData build_scenario_data(const RunConfig& config, std::uint64_t seed);

struct EntryReport {
  double beta = 0.0;
  bool ok = false;
  std::string error;
  int best_epoch = 0;
  MetricsRecord validation;
  MetricsRecord test;
  std::vector<EpochRecord> history;
  double seconds = 0.0;
};

struct SeedSweep {
  std::uint64_t seed = 0;
  std::vector<EntryReport> entries;
  std::size_t selected = 0;

  bool interior() const { return selected != 0 && selected + 1 != entries.size(); }
};

/// Sweep of config.sweep.grid at the train_added point for one seed, with
/// every successful entry's best model evaluated on the test split.
SeedSweep run_sweep_seed(const RunConfig& config, std::uint64_t seed);

struct MethodPoint {
  double beta = 0.0;
  int epoch = 0;
  MetricsRecord validation;
  MetricsRecord test;
  double seconds = 0.0;
};

struct CurvePoint {
  int added = 0;
  std::uint64_t seed = 0;
  MethodPoint proposed;
  MethodPoint baseline;
};

/// Proposed model (fixed curve.beta, or the sweep's selection) evaluated
/// without refinement; baseline trained at beta = 0 and evaluated with
/// soft k-means refinement on the train unlabeled pool.
std::vector<CurvePoint> run_curve_seed(const RunConfig& config, std::uint64_t seed);

// Commands. Each writes into config.out, echoes the effective config there and
// returns an exit code; library errors propagate as exceptions.
int cmd_gen_data(const RunConfig& config);
int cmd_train(const RunConfig& config);
int cmd_eval(const RunConfig& config);
int cmd_sweep_beta(const RunConfig& config);
int cmd_scenario_curve(const RunConfig& config);
int cmd_sample(const RunConfig& config);

int run_command(const std::string& name, const RunConfig& config);

}  // namespace flowproto::cli
