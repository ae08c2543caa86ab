#pragma once

#include "flowproto/data.hpp"
#include "flowproto/hybrid.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace flowproto::cli {

inline constexpr int kCsvSchemaVersion = 1;

struct EvaluationSettings {
  int episodes = 2000;
  int ways = 5;
  int shots = 5;
  int refine_subset = 25;
};

struct SweepSettings {
  std::string preset = "desk";  // desk | paper | custom
  std::vector<double> grid;     // resolved from the preset unless custom
  int repeats = 1;              // seeds seed, seed+1, ...
};

struct CurveSettings {
  std::optional<double> beta;  // unset: the proposed model is chosen by a sweep
  int baseline_refine_iterations = 1;
  int repeats = 1;
};

/// Everything a command reads. Every field has a default; to_json() of a
/// parsed config parses back to the same config.
struct RunConfig {
  std::string out = "flowproto-out";
  std::uint64_t seed = 1;
  int jobs = 1;
  bool record_timing = false;
  GeneratorSpec generator;  // n_classes 0: exactly what the scenario needs
  ScenarioSpec scenario;
  HybridConfig training;
  std::optional<int> train_added;  // scenario point for train / sweep-beta; unset: largest
  EvaluationSettings evaluation;
  SweepSettings sweep;
  CurveSettings curve;
  int sample_count = 1000;
  std::string checkpoint;
  std::string dataset;

  // Desk-scale reference scenario.
  RunConfig();

  // Fills derived defaults and checks ranges. Throws ConfigError.
  void resolve();

  int resolved_train_added() const;
  std::vector<std::uint64_t> seeds(int repeats) const;
};

std::vector<double> grid_preset(const std::string& name);  // throws ConfigError

/// Strict: unknown keys and wrong value types raise ConfigError naming the
/// offending key. The result is resolved.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& config);

}  // namespace flowproto::cli
