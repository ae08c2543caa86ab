#include "cli/run_config.hpp"

#include "flowproto/errors.hpp"
#include "flowproto/io.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace flowproto::cli {

using nlohmann::json;

namespace {

class ObjectReader {
 public:
  ObjectReader(const json& doc, std::string where) : doc_(doc), where_(std::move(where)) {
    if (!doc_.is_object()) throw ConfigError(label() + " must be an object");
  }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      auto n = v->get<std::int64_t>();
      if (n < INT32_MIN || n > INT32_MAX) fail(key, "a 32-bit integer");
      out = static_cast<int>(n);
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::optional<double>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        if (!v->is_number()) fail(key, "a number or null");
        out = v->get<double>();
      }
    }
  }
  void get(const char* key, std::optional<int>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        int n = 0;
        get(key, n);
        out = n;
      }
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of integers");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number_integer()) fail(key, "an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of numbers");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number()) fail(key, "an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }

  template <typename Fn>
  void object(const char* key, Fn&& fn) {
    if (const json* v = find(key)) {
      ObjectReader child(*v, where_.empty() ? key : where_ + "." + key);
      fn(child);
      child.finish();
    }
  }

  // Choice among fixed tokens; returns the index.
  template <std::size_t N>
  void choice(const char* key, const std::array<const char*, N>& tokens, std::size_t& out) {
    std::string s;
    if (!find(key)) return;
    get(key, s);
    for (std::size_t i = 0; i < N; ++i) {
      if (s == tokens[i]) {
        out = i;
        return;
      }
    }
    std::string list;
    for (const char* t : tokens) list += std::string(list.empty() ? "" : ", ") + t;
    throw ConfigError(path(key) + ": unknown value '" + s + "' (expected one of " + list + ")");
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + path(it.key().c_str()) + "'");
    }
  }

 private:
  std::string label() const { return where_.empty() ? "config" : "'" + where_ + "'"; }
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("'" + path(key) + "' must be " + what);
  }

  const json& doc_;
  std::string where_;
  std::set<std::string> seen_;
};

constexpr std::array<const char*, 2> kFamilies = {"gaussian-blobs", "concentric-rings"};
constexpr std::array<const char*, 2> kModes = {"disjoint", "overlap"};
constexpr std::array<const char*, 2> kMetrics = {"accuracy", "nce"};
constexpr std::array<const char*, 2> kScopes = {"labeled-and-unlabeled", "unlabeled-only"};
constexpr std::array<const char*, 3> kPresets = {"desk", "paper", "custom"};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

std::vector<double> grid_preset(const std::string& name) {
  if (name == "desk") return {0.0, 1e-3, 1e-2, 1e-1, 1.0};
  // The published grid, bracketed by the two reference models.
  if (name == "paper") return {0.0, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1.0};
  throw ConfigError("unknown grid preset '" + name + "'");
}

RunConfig::RunConfig() {
  generator.n_classes = 0;
  generator.separation = 12.0;
  scenario.validation_classes = 16;
  scenario.test_classes = 20;
  training.epochs = 80;
  training.validation_episodes = 1000;
  training.architecture.blocks = 2;
  training.architecture.couplings_per_block = 4;
  training.architecture.hidden = 32;
}

int RunConfig::resolved_train_added() const {
  if (train_added) return *train_added;
  return *std::max_element(scenario.added_unlabeled_classes.begin(), scenario.added_unlabeled_classes.end());
}

std::vector<std::uint64_t> RunConfig::seeds(int repeats) const {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < repeats; ++i) out.push_back(seed + static_cast<std::uint64_t>(i));
  return out;
}

void RunConfig::resolve() {
  require(!out.empty(), "'out' must not be empty");
  require(jobs >= 1, "'jobs' must be at least 1");
  require(!scenario.added_unlabeled_classes.empty(), "'scenario.added_unlabeled_classes' must not be empty");
  for (int a : scenario.added_unlabeled_classes) require(a >= 0, "added unlabeled class counts must be >= 0");
  require(scenario.labeled_classes >= 1, "'scenario.labeled_classes' must be at least 1");
  require(scenario.validation_classes >= 0 && scenario.test_classes >= 0, "class counts must be >= 0");
  if (train_added) {
    const auto& a = scenario.added_unlabeled_classes;
    require(std::find(a.begin(), a.end(), *train_added) != a.end(),
            "'train_added' must be one of scenario.added_unlabeled_classes");
  }
  const auto& added = scenario.added_unlabeled_classes;
  int needed = scenario.labeled_classes + *std::max_element(added.begin(), added.end()) +
               scenario.validation_classes + scenario.test_classes;
  if (generator.n_classes == 0) generator.n_classes = needed;
  require(generator.n_classes >= 1, "'generator.n_classes' must be positive");
  require(generator.dim >= 1, "'generator.dim' must be positive");
  require(generator.examples_per_class >= 1, "'generator.examples_per_class' must be positive");
  require(generator.std >= 0.0, "'generator.std' must be >= 0");
  generator.seed = seed;
  training.seed = seed;
  training.architecture.dim = generator.dim;
  training.validate();
  require(evaluation.episodes >= 1, "'evaluation.episodes' must be at least 1");
  require(evaluation.ways >= 1 && evaluation.shots >= 1, "'evaluation' ways and shots must be positive");
  require(evaluation.refine_subset >= 0, "'evaluation.refine_subset' must be >= 0");
  if (sweep.preset != "custom") sweep.grid = grid_preset(sweep.preset);
  require(!sweep.grid.empty(), "'sweep.grid' must not be empty");
  for (double b : sweep.grid) require(b >= 0.0 && std::isfinite(b), "sweep betas must be finite and >= 0");
  require(sweep.repeats >= 1, "'sweep.repeats' must be at least 1");
  require(curve.repeats >= 1, "'curve.repeats' must be at least 1");
  require(curve.baseline_refine_iterations >= 0, "'curve.baseline_refine_iterations' must be >= 0");
  if (curve.beta) require(*curve.beta >= 0.0 && std::isfinite(*curve.beta), "'curve.beta' must be finite and >= 0");
  require(sample_count >= 0, "'sample.n' must be >= 0");
}

RunConfig parse_run_config(const json& doc) {
  RunConfig c;
  ObjectReader r(doc, "");
  r.get("out", c.out);
  r.get("seed", c.seed);
  r.get("jobs", c.jobs);
  r.get("record_timing", c.record_timing);
  r.get("checkpoint", c.checkpoint);
  r.get("dataset", c.dataset);
  r.get("train_added", c.train_added);
  r.object("generator", [&](ObjectReader& g) {
    std::size_t fam = static_cast<std::size_t>(c.generator.family);
    g.choice("family", kFamilies, fam);
    c.generator.family = static_cast<GeneratorFamily>(fam);
    g.get("n_classes", c.generator.n_classes);
    g.get("dim", c.generator.dim);
    g.get("examples_per_class", c.generator.examples_per_class);
    g.get("separation", c.generator.separation);
    g.get("std", c.generator.std);
  });
  r.object("scenario", [&](ObjectReader& s) {
    std::size_t mode = static_cast<std::size_t>(c.scenario.mode);
    s.get("name", c.scenario.name);
    s.choice("mode", kModes, mode);
    c.scenario.mode = static_cast<ScenarioMode>(mode);
    s.get("labeled_classes", c.scenario.labeled_classes);
    s.get("labeled_per_class", c.scenario.labeled_per_class);
    s.get("labeled_fraction", c.scenario.labeled_fraction);
    s.get("added_unlabeled_classes", c.scenario.added_unlabeled_classes);
    s.get("examples_per_added_class", c.scenario.examples_per_added_class);
    s.get("validation_classes", c.scenario.validation_classes);
    s.get("test_classes", c.scenario.test_classes);
  });
  r.object("training", [&](ObjectReader& t) {
    HybridConfig& h = c.training;
    t.get("beta", h.beta);
    t.get("ways", h.ways);
    t.get("shots", h.shots);
    t.get("queries", h.queries);
    if (const json* v = t.find("unlabeled_batch")) {
      if (v->is_string() && v->get<std::string>() == "auto") {
        h.unlabeled_batch.reset();
      } else if (v->is_number_integer()) {
        h.unlabeled_batch = v->get<int>();
      } else {
        throw ConfigError("'training.unlabeled_batch' must be \"auto\" or an integer");
      }
    }
    t.get("epochs", h.epochs);
    t.get("episodes_per_epoch", h.episodes_per_epoch);
    std::size_t metric = static_cast<std::size_t>(h.early_metric);
    t.choice("early_metric", kMetrics, metric);
    h.early_metric = static_cast<EarlyMetric>(metric);
    std::size_t scope = static_cast<std::size_t>(h.generative_scope);
    t.choice("generative_scope", kScopes, scope);
    h.generative_scope = static_cast<GenerativeScope>(scope);
    t.get("validation_episodes", h.validation_episodes);
    t.get("validation_refine_iterations", h.validation_refine_iterations);
    t.get("refine_subset", h.refine_subset);
    t.object("optimizer", [&](ObjectReader& o) {
      o.get("lr", h.adam.lr);
      o.get("beta1", h.adam.beta1);
      o.get("beta2", h.adam.beta2);
      o.get("epsilon", h.adam.epsilon);
      o.get("weight_decay", h.adam.weight_decay);
    });
    t.object("flow", [&](ObjectReader& f) {
      f.get("blocks", h.architecture.blocks);
      f.get("couplings_per_block", h.architecture.couplings_per_block);
      f.get("hidden", h.architecture.hidden);
      f.get("clamp", h.architecture.clamp);
      f.get("random_permutation", h.architecture.random_permutation);
    });
  });
  r.object("evaluation", [&](ObjectReader& e) {
    e.get("episodes", c.evaluation.episodes);
    e.get("ways", c.evaluation.ways);
    e.get("shots", c.evaluation.shots);
    e.get("refine_subset", c.evaluation.refine_subset);
  });
  bool grid_given = false;
  r.object("sweep", [&](ObjectReader& s) {
    std::size_t preset = 0;
    s.choice("preset", kPresets, preset);
    c.sweep.preset = kPresets[preset];
    grid_given = s.find("grid") != nullptr;
    s.get("grid", c.sweep.grid);
    s.get("repeats", c.sweep.repeats);
  });
  if (grid_given && c.sweep.preset != "custom") {
    // An explicit grid must match its preset; a custom grid is taken as is.
    if (c.sweep.grid != grid_preset(c.sweep.preset)) {
      throw ConfigError("'sweep.grid' differs from preset '" + c.sweep.preset + "'; use preset \"custom\"");
    }
  }
  r.object("curve", [&](ObjectReader& s) {
    s.get("beta", c.curve.beta);
    s.get("baseline_refine_iterations", c.curve.baseline_refine_iterations);
    s.get("repeats", c.curve.repeats);
  });
  r.object("sample", [&](ObjectReader& s) { s.get("n", c.sample_count); });
  r.finish();
  c.resolve();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
  const HybridConfig& h = c.training;
  json doc;
  doc["out"] = c.out;
  doc["seed"] = c.seed;
  doc["jobs"] = c.jobs;
  doc["record_timing"] = c.record_timing;
  doc["checkpoint"] = c.checkpoint;
  doc["dataset"] = c.dataset;
  doc["train_added"] = c.resolved_train_added();
  doc["generator"] = {{"family", kFamilies[static_cast<std::size_t>(c.generator.family)]},
                      {"n_classes", c.generator.n_classes},
                      {"dim", c.generator.dim},
                      {"examples_per_class", c.generator.examples_per_class},
                      {"separation", c.generator.separation},
                      {"std", c.generator.std}};
  json scenario = {{"name", c.scenario.name},
                   {"mode", kModes[static_cast<std::size_t>(c.scenario.mode)]},
                   {"labeled_classes", c.scenario.labeled_classes},
                   {"labeled_per_class", c.scenario.labeled_per_class},
                   {"labeled_fraction", nullptr},
                   {"added_unlabeled_classes", c.scenario.added_unlabeled_classes},
                   {"examples_per_added_class", c.scenario.examples_per_added_class},
                   {"validation_classes", c.scenario.validation_classes},
                   {"test_classes", c.scenario.test_classes}};
  if (c.scenario.labeled_fraction) scenario["labeled_fraction"] = *c.scenario.labeled_fraction;
  doc["scenario"] = scenario;
  json training = {{"beta", h.beta},
                   {"ways", h.ways},
                   {"shots", h.shots},
                   {"queries", h.queries},
                   {"unlabeled_batch", "auto"},
                   {"epochs", h.epochs},
                   {"episodes_per_epoch", h.episodes_per_epoch},
                   {"early_metric", kMetrics[static_cast<std::size_t>(h.early_metric)]},
                   {"generative_scope", kScopes[static_cast<std::size_t>(h.generative_scope)]},
                   {"validation_episodes", h.validation_episodes},
                   {"validation_refine_iterations", h.validation_refine_iterations},
                   {"refine_subset", h.refine_subset},
                   {"optimizer",
                    {{"lr", h.adam.lr},
                     {"beta1", h.adam.beta1},
                     {"beta2", h.adam.beta2},
                     {"epsilon", h.adam.epsilon},
                     {"weight_decay", h.adam.weight_decay}}},
                   {"flow",
                    {{"blocks", h.architecture.blocks},
                     {"couplings_per_block", h.architecture.couplings_per_block},
                     {"hidden", h.architecture.hidden},
                     {"clamp", h.architecture.clamp},
                     {"random_permutation", h.architecture.random_permutation}}}};
  if (h.unlabeled_batch) training["unlabeled_batch"] = *h.unlabeled_batch;
  doc["training"] = training;
  doc["evaluation"] = {{"episodes", c.evaluation.episodes},
                       {"ways", c.evaluation.ways},
                       {"shots", c.evaluation.shots},
                       {"refine_subset", c.evaluation.refine_subset}};
  doc["sweep"] = {{"preset", c.sweep.preset}, {"grid", c.sweep.grid}, {"repeats", c.sweep.repeats}};
  doc["curve"] = {{"beta", nullptr},
                  {"baseline_refine_iterations", c.curve.baseline_refine_iterations},
                  {"repeats", c.curve.repeats}};
  if (c.curve.beta) doc["curve"]["beta"] = *c.curve.beta;
  doc["sample"] = {{"n", c.sample_count}};
  return doc;
}

}  // namespace flowproto::cli
