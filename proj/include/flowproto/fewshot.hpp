#pragma once

#include "flowproto/flow.hpp"
#include "flowproto/numerics.hpp"
#include "flowproto/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace flowproto {

/// Labeled examples grouped by class id. Class ids are kept sorted so that
/// sampling is independent of insertion order.
class LabeledPool {
 public:
  LabeledPool() = default;
  LabeledPool(std::vector<Vector> features, std::vector<int> labels);

  std::size_t size() const noexcept { return features_.size(); }
  int dim() const noexcept { return features_.empty() ? 0 : static_cast<int>(features_[0].size()); }
  const std::vector<Vector>& features() const noexcept { return features_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<int>& class_ids() const noexcept { return class_ids_; }
  // Example indices of the class at position `class_pos` in class_ids().
  const std::vector<std::size_t>& members(std::size_t class_pos) const { return members_.at(class_pos); }
  std::size_t class_position(int class_id) const;

 private:
  std::vector<Vector> features_;
  std::vector<int> labels_;
  std::vector<int> class_ids_;
  std::vector<std::vector<std::size_t>> members_;
};

/// One C-way K-shot task. Indices refer to the pool the episode was drawn
/// from; the vectors are copies of the corresponding features.
struct Episode {
  struct Query {
    std::size_t index = 0;
    Vector x;
    int label = 0;  // position in class_ids, in [0, C)
  };

  std::vector<int> class_ids;
  std::vector<std::vector<std::size_t>> support_index;
  std::vector<std::vector<Vector>> support;
  std::vector<Query> queries;

  int ways() const noexcept { return static_cast<int>(class_ids.size()); }
  std::size_t support_size() const;

  // Support (class-major) followed by queries, one example per column.
  Matrix stacked_inputs(int dim) const;
};

struct PrototypeSet {
  std::vector<int> class_ids;
  Matrix prototypes;           // d x C
  std::vector<double> counts;  // support examples behind each prototype

  int ways() const noexcept { return static_cast<int>(prototypes.cols()); }
};

struct Prediction {
  Vector probabilities;
  Vector log_probabilities;
};

struct MetricsRecord {
  double accuracy = 0.0;
  double negative_cross_entropy = 0.0;
  std::int64_t episodes = 0;
  std::int64_t queries = 0;
  std::uint64_t seed = 0;
};

/// Prototype of class c = mean of its (latent) support vectors. Throws
/// ContractViolation on an empty group or mismatched dimensions.
PrototypeSet compute_prototypes(const std::vector<std::vector<Vector>>& groups);

/// softmax over c of -|z - t_c|^2.
Prediction classify(const Vector& z, const PrototypeSet& protos);

/// Ren et al.-style soft k-means refinement: each unlabeled latent is softly
/// assigned with softmax(-|z_u - t_c|^2) and t_c becomes
/// (count_c * t_c^0 + sum_u w_uc z_u) / (count_c + sum_u w_uc), where t^0 are
/// the incoming prototypes and the weights use the current iterate.
PrototypeSet soft_kmeans_refine(const PrototypeSet& protos, const std::vector<Vector>& unlabeled,
                                int iterations);
PrototypeSet soft_kmeans_refine(const PrototypeSet& protos, const Matrix& unlabeled, int iterations);

/// Accuracy (argmax, ties to the lowest index) and mean log-probability of the
/// true class. Throws DomainError on empty or mismatched input.
MetricsRecord evaluate_metrics(const std::vector<Prediction>& predictions, const std::vector<int>& truths);

// ---------------------------------------------------------------------------
// Prototypical loss on latents.

struct PrototypicalLoss {
  double loss = 0.0;           // mean over queries of -log p(y_q)
  Matrix grad_support;         // d x (sum of group sizes), class-major
  Matrix grad_queries;         // d x Q
  std::vector<Prediction> predictions;
};

/// Loss and latent gradients for support latents (class-major columns, group
/// sizes in `group_sizes`) and query latents with labels in [0, C).
PrototypicalLoss prototypical_loss(const Matrix& support, const std::vector<std::size_t>& group_sizes,
                                   const Matrix& queries, const std::vector<int>& labels);

struct DiscResult {
  double loss = 0.0;
  Vector grad_theta;
  std::vector<Prediction> predictions;
  std::vector<int> labels;
};

/// Mean negative log-likelihood of the episode's queries under latent
/// prototypes. The parameter gradient flows through both the query latents
/// and the support latents that form the prototypes.
DiscResult disc_nll(const FlowModel& model, const Episode& episode);

// ---------------------------------------------------------------------------
// Episode construction.

/// C classes uniformly without replacement among classes holding at least K+Q
/// examples, then K support and Q queries per class, again without
/// replacement. Throws ConfigError with the counts when the pool is too small.
Episode sample_episode(const LabeledPool& pool, int ways, int shots, int queries, Rng& rng);

/// Test-time episode around `anchor`: the anchor's class plus C-1 other
/// classes chosen uniformly, K support examples per class with the anchor
/// excluded, and the anchor as the only query. The anchor's class is placed at
/// a uniformly random position.
Episode build_test_episode(const LabeledPool& pool, std::size_t anchor, int ways, int shots, Rng& rng);

struct RefineOptions {
  const Matrix* unlabeled = nullptr;  // latents, one per column
  int iterations = 0;
  std::size_t per_episode = 0;  // unlabeled latents drawn per episode
};

/// Predictions for every query of `episode` using precomputed latents of the
/// pool (column i = latent of pool example i). With refinement enabled, a
/// random subset of the unlabeled latents refines the prototypes first.
std::vector<Prediction> predict_with_latents(const Matrix& latents, const Episode& episode,
                                             const RefineOptions& refine = {}, Rng* rng = nullptr);

}  // namespace flowproto
