#pragma once

#include "flowproto/fewshot.hpp"
#include "flowproto/numerics.hpp"
#include "flowproto/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flowproto {

enum class ClassRole : std::uint8_t { kTrainLabeled = 0, kTrainUnlabeledOnly = 1, kValidation = 2, kTest = 3 };

std::string_view role_name(ClassRole role);
ClassRole parse_role(std::string_view name);  // throws ConfigError

inline constexpr int kUnknownClass = -1;

/// Unlabeled features. The true class ids are kept for auditing scenario
/// construction only; training code receives features() and nothing else.
class UnlabeledSet {
 public:
  UnlabeledSet() = default;
  UnlabeledSet(std::vector<Vector> features, std::vector<int> audit_ids);

  const std::vector<Vector>& features() const noexcept { return features_; }
  std::size_t size() const noexcept { return features_.size(); }
  bool empty() const noexcept { return features_.empty(); }

  struct Audit {
    const std::vector<int>& ids;
  };
  Audit audit() const noexcept { return {audit_ids_}; }

  // Bitwise equality of features and audit ids.
  bool operator==(const UnlabeledSet& other) const;

 private:
  std::vector<Vector> features_;
  std::vector<int> audit_ids_;
};

struct Provenance {
  std::string generator;
  std::uint64_t seed = 0;
  std::string scenario;

  bool operator==(const Provenance&) const = default;
};

struct Dataset {
  int dim = 0;
  std::vector<Vector> labeled_x;
  std::vector<int> labeled_y;
  UnlabeledSet unlabeled;
  std::map<int, ClassRole> registry;
  Provenance provenance;

  std::size_t labeled_count() const noexcept { return labeled_x.size(); }
  LabeledPool labeled_pool() const { return LabeledPool(labeled_x, labeled_y); }
  std::vector<int> classes_with_role(ClassRole role) const;

  /// Throws ContractViolation if a labeled example's class is missing from
  /// the registry or sizes disagree with dim.
  void validate() const;

  // Bitwise equality of every field.
  bool operator==(const Dataset& other) const;
};

// ---------------------------------------------------------------------------
// Synthetic generators.

enum class GeneratorFamily { kGaussianBlobs, kConcentricRings };

struct GeneratorSpec {
  GeneratorFamily family = GeneratorFamily::kGaussianBlobs;
  int n_classes = 26;
  int dim = 2;
  int examples_per_class = 100;
  double separation = 6.0;
  double std = 0.5;
  std::uint64_t seed = 1;
};

std::string_view family_name(GeneratorFamily family);

struct RawPool {
  int dim = 0;
  std::vector<Vector> features;
  std::vector<int> labels;  // 0 .. n_classes-1, grouped by class
};

/// gaussian-blobs: class centers uniform in [-separation, separation]^d, then
/// examples ~ N(center, std^2 I). concentric-rings (d = 2): class c at radius
/// (c+1) * separation, uniform angle, radial noise N(0, std^2).
RawPool generate(const GeneratorSpec& spec, Rng& rng);

// ---------------------------------------------------------------------------
// Scenarios.

enum class ScenarioMode { kDisjoint, kOverlap };

struct ScenarioSpec {
  ScenarioMode mode = ScenarioMode::kDisjoint;
  int labeled_classes = 8;
  int labeled_per_class = 40;
  // Overlap mode: fraction of each labeled class kept labeled; the rest joins
  // the unlabeled pool. Unset means labeled_per_class is used.
  std::optional<double> labeled_fraction;
  std::vector<int> added_unlabeled_classes = {0, 2, 4, 6};
  int examples_per_added_class = 100;
  int validation_classes = 6;
  int test_classes = 6;
  std::string name = "reference";
};

std::string_view mode_name(ScenarioMode mode);

/// One train dataset per added-class count, sharing identical labeled
/// examples, plus the validation and test datasets.
struct ScenarioFamily {
  std::vector<int> added_counts;
  std::vector<Dataset> train;
  Dataset validation;
  Dataset test;
};

ScenarioFamily build_scenario(const RawPool& pool, const ScenarioSpec& scenario, Rng& rng,
                              const Provenance& provenance = {});

// ---------------------------------------------------------------------------
// Files.

inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::string_view bytes);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

struct ImportedDatasets {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Default split tokens: train-labeled, train-unlabeled, validation, test.
std::map<std::string, ClassRole> default_csv_roles();

/// CSV with header split,class,f0,...,f{d-1}. Features are standardized with
/// statistics of the train rows (labeled and unlabeled). Errors carry the
/// 1-based line number.
ImportedDatasets import_csv(const std::filesystem::path& path,
                            const std::map<std::string, ClassRole>& role_mapping = default_csv_roles());
ImportedDatasets import_csv_text(std::string_view text,
                                 const std::map<std::string, ClassRole>& role_mapping = default_csv_roles());

}  // namespace flowproto
