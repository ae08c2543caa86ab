#include "flowproto/fewshot.hpp"

#include "flowproto/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace flowproto {

LabeledPool::LabeledPool(std::vector<Vector> features, std::vector<int> labels)
    : features_(std::move(features)), labels_(std::move(labels)) {
  if (features_.size() != labels_.size()) {
    throw ContractViolation("LabeledPool: features and labels differ in length");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (features_[i].size() != features_[0].size()) {
      throw ContractViolation("LabeledPool: inconsistent feature dimension at example " + std::to_string(i));
    }
    groups[labels_[i]].push_back(i);
  }
  for (auto& [id, members] : groups) {
    class_ids_.push_back(id);
    members_.push_back(std::move(members));
  }
}

std::size_t LabeledPool::class_position(int class_id) const {
  auto it = std::lower_bound(class_ids_.begin(), class_ids_.end(), class_id);
  if (it == class_ids_.end() || *it != class_id) {
    throw ContractViolation("LabeledPool: unknown class id " + std::to_string(class_id));
  }
  return static_cast<std::size_t>(it - class_ids_.begin());
}

std::size_t Episode::support_size() const {
  std::size_t n = 0;
  for (const auto& g : support) n += g.size();
  return n;
}

Matrix Episode::stacked_inputs(int dim) const {
  Matrix x(dim, static_cast<Eigen::Index>(support_size() + queries.size()));
  Eigen::Index col = 0;
  for (const auto& group : support)
    for (const auto& v : group) x.col(col++) = v;
  for (const auto& q : queries) x.col(col++) = q.x;
  return x;
}

// ---------------------------------------------------------------------------

PrototypeSet compute_prototypes(const std::vector<std::vector<Vector>>& groups) {
  if (groups.empty()) throw ContractViolation("compute_prototypes: no classes");
  const Eigen::Index d = groups[0].empty() ? 0 : groups[0][0].size();
  PrototypeSet out;
  out.prototypes.resize(d, static_cast<Eigen::Index>(groups.size()));
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].empty()) {
      throw ContractViolation("compute_prototypes: class " + std::to_string(c) + " has no support examples");
    }
    Vector sum = Vector::Zero(d);
    for (const auto& v : groups[c]) {
      if (v.size() != d) throw ContractViolation("compute_prototypes: dimension mismatch");
      sum += v;
    }
    out.prototypes.col(static_cast<Eigen::Index>(c)) = sum / static_cast<double>(groups[c].size());
    out.counts.push_back(static_cast<double>(groups[c].size()));
    out.class_ids.push_back(static_cast<int>(c));
  }
  return out;
}

namespace {

Vector negative_sq_distances(const Vector& z, const Matrix& prototypes) {
  return -(prototypes.colwise() - z).colwise().squaredNorm().transpose();
}

}  // namespace

Prediction classify(const Vector& z, const PrototypeSet& protos) {
  if (z.size() != protos.prototypes.rows()) {
    throw ContractViolation("classify: latent dimension " + std::to_string(z.size()) +
                            " does not match prototypes " + std::to_string(protos.prototypes.rows()));
  }
  Vector logits = negative_sq_distances(z, protos.prototypes);
  return {softmax(logits), log_softmax(logits)};
}

PrototypeSet soft_kmeans_refine(const PrototypeSet& protos, const Matrix& unlabeled, int iterations) {
  if (iterations < 0) throw DomainError("soft_kmeans_refine: iterations must be >= 0");
  if (iterations == 0 || unlabeled.cols() == 0) return protos;
  if (unlabeled.rows() != protos.prototypes.rows()) {
    throw ContractViolation("soft_kmeans_refine: dimension mismatch");
  }
  const Eigen::Index ways = protos.prototypes.cols();
  Vector counts = Eigen::Map<const Vector>(protos.counts.data(), ways);
  const Matrix base_sum = protos.prototypes * counts.asDiagonal();

  PrototypeSet out = protos;
  for (int it = 0; it < iterations; ++it) {
    Matrix weighted = base_sum;
    Vector mass = counts;
    for (Eigen::Index u = 0; u < unlabeled.cols(); ++u) {
      Vector w = softmax(negative_sq_distances(unlabeled.col(u), out.prototypes));
      weighted += unlabeled.col(u) * w.transpose();
      mass += w;
    }
    out.prototypes = weighted * mass.cwiseInverse().asDiagonal();
  }
  return out;
}

PrototypeSet soft_kmeans_refine(const PrototypeSet& protos, const std::vector<Vector>& unlabeled,
                                int iterations) {
  return soft_kmeans_refine(protos, stack_columns(unlabeled, static_cast<int>(protos.prototypes.rows())),
                            iterations);
}

MetricsRecord evaluate_metrics(const std::vector<Prediction>& predictions, const std::vector<int>& truths) {
  if (predictions.empty()) throw DomainError("evaluate_metrics: no predictions");
  if (predictions.size() != truths.size()) {
    throw DomainError("evaluate_metrics: " + std::to_string(predictions.size()) + " predictions but " +
                      std::to_string(truths.size()) + " labels");
  }
  double correct = 0.0;
  double log_sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Prediction& p = predictions[i];
    const int t = truths[i];
    if (t < 0 || t >= p.probabilities.size()) throw DomainError("evaluate_metrics: label out of range");
    if (argmax(p.probabilities) == t) correct += 1.0;
    log_sum += p.log_probabilities[t];
  }
  MetricsRecord m;
  const double n = static_cast<double>(predictions.size());
  m.accuracy = correct / n;
  m.negative_cross_entropy = log_sum / n;
  m.queries = static_cast<std::int64_t>(predictions.size());
  return m;
}

// ---------------------------------------------------------------------------

PrototypicalLoss prototypical_loss(const Matrix& support, const std::vector<std::size_t>& group_sizes,
                                   const Matrix& queries, const std::vector<int>& labels) {
  const Eigen::Index d = support.rows();
  const auto ways = static_cast<Eigen::Index>(group_sizes.size());
  if (queries.cols() != static_cast<Eigen::Index>(labels.size()) || queries.rows() != d) {
    throw ContractViolation("prototypical_loss: query shape mismatch");
  }
  if (queries.cols() == 0) throw ContractViolation("prototypical_loss: no queries");

  Matrix protos(d, ways);
  Eigen::Index col = 0;
  for (Eigen::Index c = 0; c < ways; ++c) {
    const auto k = static_cast<Eigen::Index>(group_sizes[static_cast<std::size_t>(c)]);
    if (k == 0) throw ContractViolation("prototypical_loss: empty support group");
    Vector sum = Vector::Zero(d);
    for (Eigen::Index j = 0; j < k; ++j) sum += support.col(col + j);
    protos.col(c) = sum / static_cast<double>(k);
    col += k;
  }
  if (col != support.cols()) throw ContractViolation("prototypical_loss: group sizes do not cover support");

  PrototypicalLoss out;
  out.grad_queries = Matrix::Zero(d, queries.cols());
  Matrix grad_protos = Matrix::Zero(d, ways);
  const double inv_q = 1.0 / static_cast<double>(queries.cols());
  double loss = 0.0;
  for (Eigen::Index q = 0; q < queries.cols(); ++q) {
    const int y = labels[static_cast<std::size_t>(q)];
    if (y < 0 || y >= ways) throw ContractViolation("prototypical_loss: label out of range");
    Matrix diff = protos.colwise() - queries.col(q);  // t_c - z
    Vector logits = negative_sq_distances(queries.col(q), protos);
    Prediction p{softmax(logits), log_softmax(logits)};
    loss -= p.log_probabilities[y];
    // d loss / d logit_c = (p_c - [c == y]) / Q; logit_c = -|z - t_c|^2.
    Vector delta = p.probabilities;
    delta[y] -= 1.0;
    delta *= inv_q;
    out.grad_queries.col(q) = 2.0 * diff * delta;
    grad_protos -= 2.0 * diff * delta.asDiagonal();
    out.predictions.push_back(std::move(p));
  }
  out.loss = loss / static_cast<double>(queries.cols());

  out.grad_support.resize(d, support.cols());
  col = 0;
  for (Eigen::Index c = 0; c < ways; ++c) {
    const auto k = static_cast<Eigen::Index>(group_sizes[static_cast<std::size_t>(c)]);
    for (Eigen::Index j = 0; j < k; ++j) out.grad_support.col(col + j) = grad_protos.col(c) / static_cast<double>(k);
    col += k;
  }
  return out;
}

DiscResult disc_nll(const FlowModel& model, const Episode& episode) {
  if (episode.support.empty() || episode.queries.empty()) {
    throw ContractViolation("disc_nll: episode needs support classes and queries");
  }
  std::vector<std::size_t> sizes;
  for (const auto& g : episode.support) sizes.push_back(g.size());
  std::vector<int> labels;
  for (const auto& q : episode.queries) labels.push_back(q.label);

  const Matrix x = episode.stacked_inputs(model.dim());
  const InverseCache cache = inverse_batch(model, x);
  const auto n_support = static_cast<Eigen::Index>(episode.support_size());
  PrototypicalLoss pl = prototypical_loss(cache.z.leftCols(n_support), sizes,
                                          cache.z.rightCols(x.cols() - n_support), labels);

  Matrix grad_z(model.dim(), x.cols());
  grad_z << pl.grad_support, pl.grad_queries;
  FlowGradient g = backward(model, cache, Vector::Zero(x.cols()), grad_z);
  return {pl.loss, std::move(g.theta), std::move(pl.predictions), std::move(labels)};
}

// ---------------------------------------------------------------------------

Episode sample_episode(const LabeledPool& pool, int ways, int shots, int queries, Rng& rng) {
  if (ways < 1 || shots < 1 || queries < 1) {
    throw ConfigError("sample_episode: C, K, Q must be positive (got C=" + std::to_string(ways) +
                      ", K=" + std::to_string(shots) + ", Q=" + std::to_string(queries) + ")");
  }
  const auto per_class = static_cast<std::size_t>(shots + queries);
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < pool.class_ids().size(); ++c) {
    if (pool.members(c).size() >= per_class) eligible.push_back(c);
  }
  if (eligible.size() < static_cast<std::size_t>(ways)) {
    throw ConfigError("sample_episode: need " + std::to_string(ways) + " classes with at least " +
                      std::to_string(per_class) + " examples, pool has " + std::to_string(eligible.size()) +
                      " (of " + std::to_string(pool.class_ids().size()) + " classes)");
  }

  Episode ep;
  for (std::size_t pick : rng.choose_without_replacement(eligible.size(), static_cast<std::size_t>(ways))) {
    const std::size_t c = eligible[pick];
    const auto& members = pool.members(c);
    const int label = static_cast<int>(ep.class_ids.size());
    ep.class_ids.push_back(pool.class_ids()[c]);
    auto chosen = rng.choose_without_replacement(members.size(), per_class);
    std::vector<std::size_t> idx;
    std::vector<Vector> xs;
    for (int k = 0; k < shots; ++k) {
      const std::size_t i = members[chosen[static_cast<std::size_t>(k)]];
      idx.push_back(i);
      xs.push_back(pool.features()[i]);
    }
    ep.support_index.push_back(std::move(idx));
    ep.support.push_back(std::move(xs));
    for (int q = 0; q < queries; ++q) {
      const std::size_t i = members[chosen[static_cast<std::size_t>(shots + q)]];
      ep.queries.push_back({i, pool.features()[i], label});
    }
  }
  return ep;
}

Episode build_test_episode(const LabeledPool& pool, std::size_t anchor, int ways, int shots, Rng& rng) {
  if (ways < 1 || shots < 1) throw ConfigError("build_test_episode: C and K must be positive");
  if (anchor >= pool.size()) throw ContractViolation("build_test_episode: anchor index out of range");
  const std::size_t anchor_class = pool.class_position(pool.labels()[anchor]);
  const auto k = static_cast<std::size_t>(shots);

  std::vector<std::size_t> anchor_members;
  for (std::size_t i : pool.members(anchor_class)) {
    if (i != anchor) anchor_members.push_back(i);
  }
  if (anchor_members.size() < k) {
    throw ConfigError("build_test_episode: anchor class " + std::to_string(pool.labels()[anchor]) + " has " +
                      std::to_string(anchor_members.size()) + " other examples, need " + std::to_string(k));
  }
  std::vector<std::size_t> others;
  for (std::size_t c = 0; c < pool.class_ids().size(); ++c) {
    if (c != anchor_class && pool.members(c).size() >= k) others.push_back(c);
  }
  if (others.size() + 1 < static_cast<std::size_t>(ways)) {
    throw ConfigError("build_test_episode: need " + std::to_string(ways - 1) + " other classes with at least " +
                      std::to_string(k) + " examples, pool has " + std::to_string(others.size()));
  }

  std::vector<std::size_t> classes;
  for (std::size_t pick : rng.choose_without_replacement(others.size(), static_cast<std::size_t>(ways - 1))) {
    classes.push_back(others[pick]);
  }
  const std::size_t anchor_pos = rng.uniform_index(static_cast<std::size_t>(ways));
  classes.insert(classes.begin() + static_cast<std::ptrdiff_t>(anchor_pos), anchor_class);

  Episode ep;
  for (std::size_t c : classes) {
    const std::vector<std::size_t>& candidates = (c == anchor_class) ? anchor_members : pool.members(c);
    ep.class_ids.push_back(pool.class_ids()[c]);
    std::vector<std::size_t> idx;
    std::vector<Vector> xs;
    for (std::size_t pick : rng.choose_without_replacement(candidates.size(), k)) {
      idx.push_back(candidates[pick]);
      xs.push_back(pool.features()[candidates[pick]]);
    }
    ep.support_index.push_back(std::move(idx));
    ep.support.push_back(std::move(xs));
  }
  ep.queries.push_back({anchor, pool.features()[anchor], static_cast<int>(anchor_pos)});
  return ep;
}

std::vector<Prediction> predict_with_latents(const Matrix& latents, const Episode& episode,
                                             const RefineOptions& refine, Rng* rng) {
  std::vector<std::vector<Vector>> groups;
  for (const auto& idx : episode.support_index) {
    std::vector<Vector> g;
    for (std::size_t i : idx) g.emplace_back(latents.col(static_cast<Eigen::Index>(i)));
    groups.push_back(std::move(g));
  }
  PrototypeSet protos = compute_prototypes(groups);

  if (refine.unlabeled && refine.iterations > 0 && refine.unlabeled->cols() > 0) {
    const auto available = static_cast<std::size_t>(refine.unlabeled->cols());
    const std::size_t take = refine.per_episode == 0 ? available : std::min(refine.per_episode, available);
    if (take == available) {
      protos = soft_kmeans_refine(protos, *refine.unlabeled, refine.iterations);
    } else {
      if (!rng) throw ContractViolation("predict_with_latents: subsampled refinement needs an rng");
      Matrix subset(refine.unlabeled->rows(), static_cast<Eigen::Index>(take));
      Eigen::Index col = 0;
      for (std::size_t i : rng->choose_without_replacement(available, take)) {
        subset.col(col++) = refine.unlabeled->col(static_cast<Eigen::Index>(i));
      }
      protos = soft_kmeans_refine(protos, subset, refine.iterations);
    }
  }

  std::vector<Prediction> out;
  for (const auto& q : episode.queries) out.push_back(classify(latents.col(static_cast<Eigen::Index>(q.index)), protos));
  return out;
}

}  // namespace flowproto
