#include "flowproto/hybrid.hpp"

#include "flowproto/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace flowproto {
namespace {

constexpr Eigen::Index kLatentChunk = 512;

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(9);
  ss << v;
  return ss.str();
}

Matrix latents_of(const FlowModel& model, const std::vector<Vector>& xs) {
  const Matrix x = stack_columns(xs, model.dim());
  Matrix z(model.dim(), x.cols());
  for (Eigen::Index start = 0; start < x.cols(); start += kLatentChunk) {
    const Eigen::Index n = std::min(kLatentChunk, x.cols() - start);
    z.middleCols(start, n) = inverse_batch(model, x.middleCols(start, n)).z;
  }
  return z;
}

// Anchors cycle through a seeded shuffle of the pool.
std::vector<Episode> anchored_episodes(const LabeledPool& pool, int count, int ways, int shots, Rng& rng) {
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int e = 0; e < count; ++e) {
    out.push_back(build_test_episode(pool, order[static_cast<std::size_t>(e) % order.size()], ways, shots, rng));
  }
  return out;
}

MetricsRecord score_episodes(const Matrix& latents, const std::vector<Episode>& episodes, const Matrix* unlabeled,
                             int refine_iterations, int refine_subset, Rng& refine_rng) {
  RefineOptions refine;
  if (unlabeled && refine_iterations > 0) {
    refine.unlabeled = unlabeled;
    refine.iterations = refine_iterations;
    refine.per_episode = static_cast<std::size_t>(std::max(refine_subset, 0));
  }
  std::vector<Prediction> predictions;
  std::vector<int> truths;
  for (const Episode& ep : episodes) {
    for (auto& p : predict_with_latents(latents, ep, refine, &refine_rng)) predictions.push_back(std::move(p));
    for (const auto& q : ep.queries) truths.push_back(q.label);
  }
  MetricsRecord m = evaluate_metrics(predictions, truths);
  m.episodes = static_cast<std::int64_t>(episodes.size());
  return m;
}

}  // namespace

void HybridConfig::validate() const {
  if (alpha != 1.0) throw ConfigError("alpha is fixed to 1 (got " + fmt_double(alpha) + ")");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be a finite value >= 0 (got " + fmt_double(beta) + ")");
  if (ways < 2) throw ConfigError("ways (C) must be >= 2");
  if (shots < 1) throw ConfigError("shots (K) must be >= 1");
  if (queries < 1) throw ConfigError("queries (Q) must be >= 1");
  if (unlabeled_batch && *unlabeled_batch < 0) throw ConfigError("unlabeled_batch must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be >= 1");
  if (validation_episodes < 1) throw ConfigError("validation_episodes must be >= 1");
  if (validation_refine_iterations < 0) throw ConfigError("validation_refine_iterations must be >= 0");
  if (!(adam.lr > 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) ||
      !(adam.epsilon > 0) || !(adam.weight_decay >= 0)) {
    throw ConfigError("invalid optimizer hyperparameters");
  }
  if (architecture.dim < 1 || architecture.blocks < 0 || architecture.couplings_per_block < 0 ||
      architecture.hidden < 1 || !(architecture.clamp > 0)) {
    throw ConfigError("invalid flow architecture");
  }
}

double metric_value(const MetricsRecord& m, EarlyMetric metric) {
  return metric == EarlyMetric::kAccuracy ? m.accuracy : m.negative_cross_entropy;
}

// ---------------------------------------------------------------------------

GenerativeResult generative_term(const FlowModel& model, const Matrix& x) {
  if (x.cols() == 0) throw ContractViolation("generative_term: empty batch");
  const InverseCache cache = inverse_batch(model, x);
  const double n = static_cast<double>(x.cols());
  FlowGradient g = backward(model, cache, Vector::Constant(x.cols(), 1.0 / n), Matrix::Zero(model.dim(), x.cols()));
  return {cache.log_prob.sum() / n, std::move(g.theta)};
}

CompositeResult composite_loss(const FlowModel& model, const Episode& episode, const std::vector<Vector>& unlabeled,
                               double beta, GenerativeScope scope) {
  if (!(beta >= 0.0)) throw ConfigError("composite_loss: beta must be >= 0 (got " + fmt_double(beta) + ")");
  if (beta == 0.0) {
    DiscResult d = disc_nll(model, episode);
    return {d.loss, std::move(d.grad_theta), d.loss, std::numeric_limits<double>::quiet_NaN(),
            std::move(d.predictions), std::move(d.labels)};
  }

  const int dim = model.dim();
  const auto n_support = static_cast<Eigen::Index>(episode.support_size());
  const auto n_labeled = n_support + static_cast<Eigen::Index>(episode.queries.size());
  const auto n_unlabeled = static_cast<Eigen::Index>(unlabeled.size());
  Matrix x(dim, n_labeled + n_unlabeled);
  x.leftCols(n_labeled) = episode.stacked_inputs(dim);
  for (Eigen::Index i = 0; i < n_unlabeled; ++i) x.col(n_labeled + i) = unlabeled[static_cast<std::size_t>(i)];

  const Eigen::Index gen_start = scope == GenerativeScope::kUnlabeledOnly ? n_labeled : 0;
  const Eigen::Index gen_count = x.cols() - gen_start;
  if (gen_count == 0) throw ContractViolation("composite_loss: empty generative batch");

  std::vector<std::size_t> sizes;
  for (const auto& g : episode.support) sizes.push_back(g.size());
  std::vector<int> labels;
  for (const auto& q : episode.queries) labels.push_back(q.label);

  const InverseCache cache = inverse_batch(model, x);
  PrototypicalLoss pl = prototypical_loss(cache.z.leftCols(n_support), sizes,
                                          cache.z.middleCols(n_support, n_labeled - n_support), labels);
  const double mean_lp = cache.log_prob.segment(gen_start, gen_count).sum() / static_cast<double>(gen_count);

  Vector grad_lp = Vector::Zero(x.cols());
  grad_lp.segment(gen_start, gen_count).setConstant(-beta / static_cast<double>(gen_count));
  Matrix grad_z = Matrix::Zero(dim, x.cols());
  grad_z.leftCols(n_support) = pl.grad_support;
  grad_z.middleCols(n_support, n_labeled - n_support) = pl.grad_queries;
  FlowGradient g = backward(model, cache, grad_lp, grad_z);

  return {pl.loss - beta * mean_lp, std::move(g.theta), pl.loss, mean_lp, std::move(pl.predictions), std::move(labels)};
}

// ---------------------------------------------------------------------------

std::size_t unlabeled_batch_size(const HybridConfig& config, std::size_t labeled_total, std::size_t unlabeled_total) {
  if (config.unlabeled_batch) return std::min(static_cast<std::size_t>(*config.unlabeled_batch), unlabeled_total);
  if (unlabeled_total == 0) return 0;
  if (labeled_total == 0) throw ConfigError("auto-ratio unlabeled batch needs labeled examples");
  const auto per_episode = static_cast<std::int64_t>(config.ways) * (config.shots + config.queries);
  const std::int64_t n = div_round_half_even(per_episode * static_cast<std::int64_t>(unlabeled_total),
                                             static_cast<std::int64_t>(labeled_total));
  return std::min(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), unlabeled_total);
}

Minibatch make_minibatch(const LabeledPool& labeled, const std::vector<Vector>& unlabeled, const HybridConfig& config,
                         Rng& episode_rng, Rng& unlabeled_rng) {
  Minibatch mb;
  mb.episode = sample_episode(labeled, config.ways, config.shots, config.queries, episode_rng);
  const std::size_t n = unlabeled_batch_size(config, labeled.size(), unlabeled.size());
  if (n > 0) {
    for (std::size_t i : unlabeled_rng.choose_without_replacement(unlabeled.size(), n)) {
      mb.unlabeled.push_back(unlabeled[i]);
    }
  }
  return mb;
}

// ---------------------------------------------------------------------------

FlowModel TrainState::best_model() const {
  FlowModel m = model;
  if (best_parameters.size() == m.parameter_count()) m.set_parameters(best_parameters);
  return m;
}

TrainState train(const HybridConfig& config, const Dataset& train_set, const Dataset& validation_set,
                 const EpochCallback& on_epoch) {
  config.validate();
  if (config.architecture.dim != train_set.dim || validation_set.dim != train_set.dim) {
    throw ConfigError("train: architecture dim " + std::to_string(config.architecture.dim) +
                      " does not match dataset dims " + std::to_string(train_set.dim) + "/" +
                      std::to_string(validation_set.dim));
  }
  for (const auto& [id, role] : validation_set.registry) {
    if (train_set.registry.count(id)) {
      throw ConfigError("train: validation class " + std::to_string(id) + " is also a training class");
    }
  }

  const Rng master(config.seed);
  Rng init_rng = master.derive(1);
  TrainState state;
  state.rng = master.derive(2);
  state.unlabeled_rng = master.derive(5);
  state.train_registry = train_set.registry;
  state.model = FlowModel::build(config.architecture, init_rng);

  const LabeledPool pool = train_set.labeled_pool();
  const std::vector<Vector>& unlabeled = train_set.unlabeled.features();
  {
    std::vector<Vector> all = train_set.labeled_x;
    all.insert(all.end(), unlabeled.begin(), unlabeled.end());
    state.model.set_standardizer(Standardizer::fit(stack_columns(all, train_set.dim)));
  }

  Minibatch first = make_minibatch(pool, unlabeled, config, state.rng, state.unlabeled_rng);
  {
    Matrix init = first.episode.stacked_inputs(train_set.dim);
    Matrix batch(train_set.dim, init.cols() + static_cast<Eigen::Index>(first.unlabeled.size()));
    batch << init, stack_columns(first.unlabeled, train_set.dim);
    init_actnorm(state.model, batch);
  }
  Vector theta = state.model.parameters();
  state.adam = AdamState::zeros(theta.size(), config.adam);
  state.best_parameters = theta;

  const LabeledPool val_pool = validation_set.labeled_pool();
  Rng val_rng = master.derive(3);
  const std::vector<Episode> val_episodes =
      anchored_episodes(val_pool, config.validation_episodes, config.ways, config.shots, val_rng);

  double best_score = -std::numeric_limits<double>::infinity();
  std::optional<Minibatch> pending = std::move(first);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<Prediction> predictions;
    std::vector<int> truths;
    double loss_sum = 0.0, disc_sum = 0.0;
    for (int step = 1; step <= config.episodes_per_epoch; ++step) {
      Minibatch mb = pending ? std::move(*pending)
                             : make_minibatch(pool, unlabeled, config, state.rng, state.unlabeled_rng);
      pending.reset();
      CompositeResult r;
      try {
        r = composite_loss(state.model, mb.episode, mb.unlabeled, config.beta, config.generative_scope);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(r.loss) || !all_finite(r.grad_theta)) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": non-finite loss or gradient (loss " + fmt_double(r.loss) + ")");
      }
      adam_step(theta, r.grad_theta, state.adam);
      if (!all_finite(theta)) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": non-finite parameters after update");
      }
      state.model.set_parameters(theta);
      loss_sum += r.loss;
      disc_sum += r.disc_loss;
      for (auto& p : r.predictions) predictions.push_back(std::move(p));
      truths.insert(truths.end(), r.labels.begin(), r.labels.end());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train = evaluate_metrics(predictions, truths);
    rec.train.episodes = config.episodes_per_epoch;
    rec.train.seed = config.seed;
    rec.mean_loss = loss_sum / config.episodes_per_epoch;
    rec.mean_disc_loss = disc_sum / config.episodes_per_epoch;
    try {
      const Matrix val_latents = latents_of(state.model, val_pool.features());
      Matrix unl_latents;
      if (config.validation_refine_iterations > 0 && !unlabeled.empty()) unl_latents = latents_of(state.model, unlabeled);
      Rng refine_rng = master.derive(4);
      rec.validation = score_episodes(val_latents, val_episodes,
                                      unl_latents.cols() > 0 ? &unl_latents : nullptr,
                                      config.validation_refine_iterations, config.refine_subset, refine_rng);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " validation: " + e.what());
    }
    rec.validation.seed = config.seed;
    state.epoch = epoch;
    state.history.push_back(rec);

    const double score = metric_value(rec.validation, config.early_metric);
    if (score > best_score) {
      best_score = score;
      state.best_epoch = epoch;
      state.best_parameters = theta;
    }
    if (on_epoch) on_epoch(state);
  }
  return state;
}

// ---------------------------------------------------------------------------

MetricsRecord evaluate(const FlowModel& model, const std::map<int, ClassRole>& train_registry, const Dataset& test_set,
                       const EvalOptions& options) {
  std::vector<int> overlap;
  for (const auto& [id, role] : test_set.registry) {
    if (train_registry.count(id)) overlap.push_back(id);
  }
  if (!overlap.empty()) {
    std::string ids;
    for (int id : overlap) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
    throw ConfigError("evaluate: test classes overlap training classes (" + ids + ")");
  }
  if (options.episodes < 1) throw ConfigError("evaluate: episodes must be >= 1");
  if (test_set.dim != model.dim()) throw ConfigError("evaluate: dataset dim does not match the model");

  const LabeledPool pool = test_set.labeled_pool();
  Rng rng(options.seed, 7);
  const std::vector<Episode> episodes = anchored_episodes(pool, options.episodes, options.ways, options.shots, rng);
  const Matrix latents = latents_of(model, pool.features());
  Matrix unl;
  if (options.refine_iterations > 0 && options.unlabeled && !options.unlabeled->empty()) {
    unl = latents_of(model, *options.unlabeled);
  }
  Rng refine_rng(options.seed, 8);
  MetricsRecord m = score_episodes(latents, episodes, unl.cols() > 0 ? &unl : nullptr, options.refine_iterations,
                                   options.refine_subset, refine_rng);
  m.seed = options.seed;
  return m;
}

// ---------------------------------------------------------------------------

SweepResult sweep_beta(const std::vector<double>& grid, const HybridConfig& config, const Dataset& train_set,
                       const Dataset& validation_set, int jobs) {
  if (grid.empty()) throw ConfigError("sweep_beta: empty grid");
  std::set<double> distinct;
  for (double b : grid) {
    if (!(b >= 0.0) || !std::isfinite(b)) throw ConfigError("sweep_beta: grid entries must be finite and >= 0");
    if (!distinct.insert(b).second) throw ConfigError("sweep_beta: duplicate grid entry " + fmt_double(b));
  }
  config.validate();

  SweepResult result;
  result.entries.resize(grid.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr fatal;
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      SweepEntry& entry = result.entries[i];
      entry.beta = grid[i];
      HybridConfig c = config;
      c.beta = grid[i];
      try {
        TrainState st = train(c, train_set, validation_set);
        entry.ok = true;
        entry.best_epoch = st.best_epoch;
        if (st.best_epoch > 0) entry.best_validation = st.history[static_cast<std::size_t>(st.best_epoch - 1)].validation;
        entry.state = std::move(st);
      } catch (const NumericError& e) {
        entry.ok = false;
        entry.error = "beta=" + fmt_double(grid[i]) + ": " + e.what();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!fatal) fatal = std::current_exception();
      }
    }
  };
  const int threads = std::clamp(jobs, 1, static_cast<int>(grid.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < result.entries.size(); ++i) {
    const SweepEntry& e = result.entries[i];
    if (!e.ok) continue;
    if (!best) {
      best = i;
      continue;
    }
    const SweepEntry& b = result.entries[*best];
    const double score = metric_value(e.best_validation, config.early_metric);
    const double best_score = metric_value(b.best_validation, config.early_metric);
    if (score > best_score || (score == best_score && e.beta < b.beta)) best = i;
  }
  if (!best) {
    std::string msg = "sweep_beta: every grid entry failed";
    for (const auto& e : result.entries) msg += "\n  " + e.error;
    throw NumericError(msg);
  }
  result.selected = *best;
  return result;
}

}  // namespace flowproto
