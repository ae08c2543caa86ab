#pragma once

#include "flowproto/data.hpp"
#include "flowproto/fewshot.hpp"
#include "flowproto/flow.hpp"
#include "flowproto/numerics.hpp"
#include "flowproto/rng.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace flowproto {

enum class EarlyMetric { kAccuracy, kNce };
enum class GenerativeScope { kLabeledAndUnlabeled, kUnlabeledOnly };

struct HybridConfig {
  double alpha = 1.0;  // fixed; kept for the record
  double beta = 0.0;
  int ways = 5;
  int shots = 5;
  int queries = 5;
  std::optional<int> unlabeled_batch;  // unset: auto-ratio
  int epochs = 20;
  int episodes_per_epoch = 25;
  AdamHyper adam;
  std::uint64_t seed = 1;
  EarlyMetric early_metric = EarlyMetric::kNce;
  GenerativeScope generative_scope = GenerativeScope::kLabeledAndUnlabeled;
  FlowArchitecture architecture;
  int validation_episodes = 300;
  // Soft k-means refinement of validation prototypes with the train
  // unlabeled pool (the self-training baseline); 0 disables it.
  int validation_refine_iterations = 0;
  int refine_subset = 25;

  // Throws ConfigError.
  void validate() const;
};

struct CompositeResult {
  double loss = 0.0;
  Vector grad_theta;
  double disc_loss = 0.0;
  // Mean log-likelihood over the generative batch; NaN when beta == 0 (the
  // term is skipped).
  double mean_log_prob = 0.0;
  std::vector<Prediction> predictions;
  std::vector<int> labels;
};

/// disc_nll(episode) - beta * mean log_prob over the generative batch. The
/// batch is the episode's labeled examples plus `unlabeled`, or `unlabeled`
/// alone under GenerativeScope::kUnlabeledOnly. beta == 0 returns disc_nll's
/// result unchanged. Throws ConfigError for beta < 0.
CompositeResult composite_loss(const FlowModel& model, const Episode& episode,
                               const std::vector<Vector>& unlabeled, double beta,
                               GenerativeScope scope = GenerativeScope::kLabeledAndUnlabeled);

struct GenerativeResult {
  double mean_log_prob = 0.0;
  Vector grad_theta;  // gradient of mean_log_prob
};

GenerativeResult generative_term(const FlowModel& model, const Matrix& x);

struct Minibatch {
  Episode episode;
  std::vector<Vector> unlabeled;
};

/// Size of the unlabeled half of a minibatch: the configured size, or with
/// auto-ratio round-half-even(C (K+Q) U / L), both clamped to [0, U].
std::size_t unlabeled_batch_size(const HybridConfig& config, std::size_t labeled_total,
                                 std::size_t unlabeled_total);

/// The episode comes from `episode_rng` and the unlabeled draw from
/// `unlabeled_rng`, so the episode sequence does not depend on the unlabeled
/// pool.
Minibatch make_minibatch(const LabeledPool& labeled, const std::vector<Vector>& unlabeled,
                         const HybridConfig& config, Rng& episode_rng, Rng& unlabeled_rng);

struct EpochRecord {
  int epoch = 0;
  MetricsRecord train;
  MetricsRecord validation;
  double mean_loss = 0.0;
  double mean_disc_loss = 0.0;
};

struct TrainState {
  FlowModel model{1};
  AdamState adam;
  int epoch = 0;
  Rng rng{0};
  Rng unlabeled_rng{0};
  std::vector<EpochRecord> history;
  // Best epoch by the configured validation metric (0: no epoch trained) and
  // the parameters at its end.
  int best_epoch = 0;
  Vector best_parameters;
  std::map<int, ClassRole> train_registry;

  FlowModel best_model() const;
};

using EpochCallback = std::function<void(const TrainState&)>;

/// Fits the standardizer on the train features (labeled and unlabeled), runs
/// init_actnorm on the first minibatch, then epochs x episodes_per_epoch Adam
/// steps on composite_loss. Validation metrics come from a fixed, seeded set
/// of validation episodes. Throws NumericError naming the epoch and step on a
/// non-finite loss or parameter.
TrainState train(const HybridConfig& config, const Dataset& train_set, const Dataset& validation_set,
                 const EpochCallback& on_epoch = {});

struct EvalOptions {
  int episodes = 2000;
  int ways = 5;
  int shots = 5;
  std::uint64_t seed = 1;
  // Soft k-means refinement with `unlabeled` (features, mapped through the
  // flow); 0 iterations disables it.
  int refine_iterations = 0;
  int refine_subset = 25;
  const std::vector<Vector>* unlabeled = nullptr;
};

/// Few-shot evaluation on `test_set`: each episode takes the next anchor from
/// a seeded shuffle of the test examples and builds a test episode around it.
/// Throws ConfigError if any test class is registered for training.
MetricsRecord evaluate(const FlowModel& model, const std::map<int, ClassRole>& train_registry,
                       const Dataset& test_set, const EvalOptions& options);

struct SweepEntry {
  double beta = 0.0;
  bool ok = false;
  std::string error;
  int best_epoch = 0;
  MetricsRecord best_validation;
  std::optional<TrainState> state;
};

struct SweepResult {
  std::vector<SweepEntry> entries;  // in grid order
  std::size_t selected = 0;         // index into entries
  double selected_beta() const { return entries.at(selected).beta; }
  int selected_epoch() const { return entries.at(selected).best_epoch; }
};

/// Trains one model per beta with the same seed, so every grid entry sees the
/// same initialization and minibatch sequence. Selects the entry whose best
/// validation epoch scores highest on the configured metric; ties go to the
/// smaller beta. A NumericError marks only its own entry as failed; if every
/// entry fails, NumericError is thrown. `jobs` > 1 trains entries in parallel
/// without changing results.
SweepResult sweep_beta(const std::vector<double>& grid, const HybridConfig& config, const Dataset& train_set,
                       const Dataset& validation_set, int jobs = 1);

double metric_value(const MetricsRecord& m, EarlyMetric metric);

}  // namespace flowproto
