#include "cli/commands.hpp"

#include "flowproto/checkpoint.hpp"
#include "flowproto/errors.hpp"
#include "flowproto/flow.hpp"
#include "flowproto/io.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

namespace flowproto::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DomainError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const ParseError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitInternal;
}

namespace {

std::ostream* console = &std::cout;

void print(const std::string& text) {
  if (console) *console << text << std::flush;
}

// Files written by one command. rollback() deletes them again.
class OutputDir {
 public:
  explicit OutputDir(const fs::path& dir) : dir_(dir) {
    std::error_code ec;
    bool existed = fs::is_directory(dir, ec);
    if (!existed) {
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
      created_ = true;
    }
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, std::string_view bytes) {
    write_file_atomic(dir_ / name, bytes);
    written_.push_back(dir_ / name);
  }

  void rollback() noexcept {
    std::error_code ec;
    for (const fs::path& p : written_) fs::remove(p, ec);
    if (created_) fs::remove(dir_, ec);
  }

 private:
  fs::path dir_;
  bool created_ = false;
  std::vector<fs::path> written_;
};

void echo_config(OutputDir& out, const RunConfig& config) {
  out.write("effective_config.json", to_json(config).dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Runs fn(0..n-1) on up to `jobs` threads; rethrows the exception of the
// lowest failing index.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> workers;
    for (int w = 0; w < std::min<int>(jobs, static_cast<int>(n)); ++w) {
      workers.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next == n) return;
            i = next++;
          }
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

EvalOptions eval_options(const RunConfig& config, std::uint64_t seed) {
  EvalOptions o;
  o.episodes = config.evaluation.episodes;
  o.ways = config.evaluation.ways;
  o.shots = config.evaluation.shots;
  o.refine_subset = config.evaluation.refine_subset;
  o.seed = seed;
  return o;
}

HybridConfig training_for(const RunConfig& config, std::uint64_t seed) {
  HybridConfig h = config.training;
  h.seed = seed;
  return h;
}

ResultRow make_row(const std::string& id, const std::string& method, int added, double beta, int epoch,
                   std::uint64_t seed, const std::string& split, const MetricsRecord& m, double seconds,
                   const RunConfig& config) {
  ResultRow r;
  r.scenario_id = id;
  r.method = method;
  r.added_unlabeled_classes = added;
  r.beta = beta;
  r.epoch = epoch;
  r.seed = seed;
  r.split = split;
  r.episodes = static_cast<int>(m.episodes);
  r.accuracy = m.accuracy;
  r.negative_cross_entropy = m.negative_cross_entropy;
  r.wall_clock_seconds = config.record_timing ? seconds : 0.0;
  return r;
}

json metrics_json(const MetricsRecord& m) {
  return {{"accuracy", m.accuracy}, {"negative_cross_entropy", m.negative_cross_entropy}, {"episodes", m.episodes}};
}

json registry_json(const std::map<int, ClassRole>& registry) {
  json arr = json::array();
  for (auto [id, role] : registry) arr.push_back({id, std::string(role_name(role))});
  return arr;
}

std::map<int, ClassRole> registry_from_json(const json& arr) {
  std::map<int, ClassRole> out;
  if (!arr.is_array()) throw ParseError("checkpoint sidecar: train_registry must be an array", 0);
  for (const json& e : arr) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_string()) {
      throw ParseError("checkpoint sidecar: malformed train_registry entry", 0);
    }
    out[e[0].get<int>()] = parse_role(e[1].get<std::string>());
  }
  return out;
}

void log_epoch(const TrainState& s) {
  const EpochRecord& r = s.history.back();
  spdlog::debug("epoch {} loss {:.6f} train acc {:.4f} val acc {:.4f} val nce {:.4f}", r.epoch, r.mean_loss,
                r.train.accuracy, r.validation.accuracy, r.validation.negative_cross_entropy);
}

}  // namespace

void set_console(std::ostream* out) { console = out; }

void init_logging(const std::string& level) {
  spdlog::level::level_enum lv;
  if (level == "error") lv = spdlog::level::err;
  else if (level == "info") lv = spdlog::level::info;
  else if (level == "debug") lv = spdlog::level::debug;
  else throw ConfigError("FLOWPROTO_LOG must be error, info or debug (got '" + level + "')");
  auto logger = spdlog::get("flowproto");
  if (!logger) {
    logger = spdlog::stderr_logger_mt("flowproto");
    logger->set_pattern("[%l] %v");
  }
  spdlog::set_default_logger(logger);
  spdlog::set_level(lv);
}

const Dataset& ScenarioData::train_for(int added) const {
  for (std::size_t i = 0; i < family.added_counts.size(); ++i) {
    if (family.added_counts[i] == added) return family.train[i];
  }
  throw ConfigError("scenario has no point with " + std::to_string(added) + " added unlabeled classes");
}

ScenarioData build_scenario_data(const RunConfig& config, std::uint64_t seed) {
  GeneratorSpec g = config.generator;
  g.seed = seed;
  Rng pool_rng(seed);
  RawPool pool = generate(g, pool_rng);
  Rng split_rng(seed, 1);
  Provenance prov{std::string(family_name(g.family)), seed, config.scenario.name};
  ScenarioData data;
  data.id = config.scenario.name + "-" + std::string(mode_name(config.scenario.mode));
  data.family = build_scenario(pool, config.scenario, split_rng, prov);
  return data;
}

SeedSweep run_sweep_seed(const RunConfig& config, std::uint64_t seed) {
  ScenarioData data = build_scenario_data(config, seed);
  const Dataset& train_set = data.train_for(config.resolved_train_added());
  auto t0 = std::chrono::steady_clock::now();
  SweepResult sweep = sweep_beta(config.sweep.grid, training_for(config, seed), train_set, data.family.validation,
                                 config.jobs);
  double per_entry = seconds_since(t0) / static_cast<double>(sweep.entries.size());
  SeedSweep out;
  out.seed = seed;
  out.selected = sweep.selected;
  out.entries.resize(sweep.entries.size());
  parallel_for(sweep.entries.size(), config.jobs, [&](std::size_t i) {
    const SweepEntry& e = sweep.entries[i];
    EntryReport& r = out.entries[i];
    r.beta = e.beta;
    r.ok = e.ok;
    r.error = e.error;
    r.best_epoch = e.best_epoch;
    r.validation = e.best_validation;
    r.seconds = per_entry;
    if (e.ok) {
      r.history = e.state->history;
      r.test = evaluate(e.state->best_model(), e.state->train_registry, data.family.test, eval_options(config, seed));
    }
  });
  spdlog::info("seed {}: selected beta {} (epoch {})", seed, out.entries[out.selected].beta,
               out.entries[out.selected].best_epoch);
  return out;
}

std::vector<CurvePoint> run_curve_seed(const RunConfig& config, std::uint64_t seed) {
  ScenarioData data = build_scenario_data(config, seed);
  const auto& counts = data.family.added_counts;
  std::vector<CurvePoint> points(counts.size());
  const int inner_jobs = counts.size() > 1 ? 1 : config.jobs;
  parallel_for(counts.size(), config.jobs, [&](std::size_t i) {
    const Dataset& train_set = data.family.train[i];
    CurvePoint& p = points[i];
    p.added = counts[i];
    p.seed = seed;

    auto t0 = std::chrono::steady_clock::now();
    HybridConfig proposed = training_for(config, seed);
    FlowModel model{1};
    std::map<int, ClassRole> registry;
    if (config.curve.beta) {
      proposed.beta = *config.curve.beta;
      TrainState s = train(proposed, train_set, data.family.validation, log_epoch);
      p.proposed.beta = proposed.beta;
      p.proposed.epoch = s.best_epoch;
      p.proposed.validation = s.best_epoch > 0 ? s.history[s.best_epoch - 1].validation : MetricsRecord{};
      model = s.best_model();
      registry = s.train_registry;
    } else {
      SweepResult sw = sweep_beta(config.sweep.grid, proposed, train_set, data.family.validation, inner_jobs);
      const SweepEntry& e = sw.entries[sw.selected];
      p.proposed.beta = e.beta;
      p.proposed.epoch = e.best_epoch;
      p.proposed.validation = e.best_validation;
      model = e.state->best_model();
      registry = e.state->train_registry;
    }
    p.proposed.test = evaluate(model, registry, data.family.test, eval_options(config, seed));
    p.proposed.seconds = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    HybridConfig baseline = training_for(config, seed);
    baseline.beta = 0.0;
    baseline.validation_refine_iterations = config.curve.baseline_refine_iterations;
    baseline.refine_subset = config.evaluation.refine_subset;
    TrainState b = train(baseline, train_set, data.family.validation, log_epoch);
    EvalOptions o = eval_options(config, seed);
    o.refine_iterations = config.curve.baseline_refine_iterations;
    o.unlabeled = &train_set.unlabeled.features();
    p.baseline.beta = 0.0;
    p.baseline.epoch = b.best_epoch;
    p.baseline.validation = b.best_epoch > 0 ? b.history[b.best_epoch - 1].validation : MetricsRecord{};
    p.baseline.test = evaluate(b.best_model(), b.train_registry, data.family.test, o);
    p.baseline.seconds = seconds_since(t0);
    spdlog::info("seed {} added {}: proposed acc {:.4f} nce {:.4f} / baseline acc {:.4f} nce {:.4f}", seed, p.added,
                 p.proposed.test.accuracy, p.proposed.test.negative_cross_entropy, p.baseline.test.accuracy,
                 p.baseline.test.negative_cross_entropy);
  });
  return points;
}

int cmd_gen_data(const RunConfig& config) {
  ScenarioData data = build_scenario_data(config, config.seed);
  std::vector<std::pair<std::string, std::string>> files;
  for (std::size_t i = 0; i < data.family.added_counts.size(); ++i) {
    files.emplace_back("train_added_" + std::to_string(data.family.added_counts[i]) + ".fpds",
                       encode_dataset(data.family.train[i]));
  }
  files.emplace_back("validation.fpds", encode_dataset(data.family.validation));
  files.emplace_back("test.fpds", encode_dataset(data.family.test));

  json manifest;
  manifest["scenario_id"] = data.id;
  manifest["seed"] = config.seed;
  manifest["files"] = json::array();
  for (std::size_t i = 0; i < files.size(); ++i) {
    json f = {{"name", files[i].first}, {"bytes", files[i].second.size()}, {"crc32", crc32(verify_crc(files[i].second, "FPDS"))}};
    if (i < data.family.added_counts.size()) {
      f["split"] = "train";
      f["added_unlabeled_classes"] = data.family.added_counts[i];
    } else {
      f["split"] = i == files.size() - 2 ? "validation" : "test";
    }
    manifest["files"].push_back(f);
  }
  std::string manifest_text = manifest.dump(2) + "\n";

  OutputDir out(config.out);
  try {
    for (const auto& [name, bytes] : files) out.write(name, bytes);
    out.write("manifest.json", manifest_text);
    echo_config(out, config);
  } catch (...) {
    out.rollback();
    throw;
  }
  print(manifest_text);
  return kExitOk;
}

int cmd_train(const RunConfig& config) {
  const int added = config.resolved_train_added();
  Dataset train_set, validation_set;
  std::optional<Dataset> test_set;
  std::string scenario_id;
  if (!config.dataset.empty()) {
    fs::path dir = config.dataset;
    train_set = read_dataset(dir / ("train_added_" + std::to_string(added) + ".fpds"));
    validation_set = read_dataset(dir / "validation.fpds");
    scenario_id = config.scenario.name + "-" + std::string(mode_name(config.scenario.mode));
  } else {
    ScenarioData data = build_scenario_data(config, config.seed);
    train_set = data.train_for(added);
    validation_set = data.family.validation;
    test_set = data.family.test;
    scenario_id = data.id;
  }
  OutputDir out(config.out);
  auto t0 = std::chrono::steady_clock::now();
  std::vector<double> epoch_seconds;
  TrainState state = train(config.training, train_set, validation_set, [&](const TrainState& s) {
    log_epoch(s);
    epoch_seconds.push_back(seconds_since(t0));
  });

  std::vector<ResultRow> rows;
  for (std::size_t i = 0; i < state.history.size(); ++i) {
    const EpochRecord& r = state.history[i];
    rows.push_back(make_row(scenario_id, "proposed", added, config.training.beta, r.epoch, config.seed, "train",
                            r.train, epoch_seconds[i], config));
    rows.push_back(make_row(scenario_id, "proposed", added, config.training.beta, r.epoch, config.seed,
                            "validation", r.validation, epoch_seconds[i], config));
  }
  json extra = {{"method", "proposed"},
                {"scenario_id", scenario_id},
                {"added_unlabeled_classes", added},
                {"beta", config.training.beta},
                {"epoch", state.best_epoch},
                {"seed", config.seed},
                {"train_registry", registry_json(state.train_registry)}};
  if (state.best_epoch > 0) extra["validation"] = metrics_json(state.history[state.best_epoch - 1].validation);
  save_checkpoint(state.best_model(), out.path("model.fpro"), extra);
  out.write("train.csv", format_table(rows));
  if (test_set) out.write("test.fpds", encode_dataset(*test_set));
  echo_config(out, config);
  spdlog::info("trained {} epochs; best epoch {}", state.epoch, state.best_epoch);
  return kExitOk;
}

int cmd_eval(const RunConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("eval needs a checkpoint (--checkpoint)");
  if (config.dataset.empty()) throw ConfigError("eval needs a dataset (--dataset)");
  fs::path dataset_path = config.dataset;
  if (fs::is_directory(dataset_path)) dataset_path /= "test.fpds";
  FlowModel model = load_checkpoint(config.checkpoint);
  json sidecar = load_checkpoint_sidecar(config.checkpoint);
  Dataset test_set = read_dataset(dataset_path);
  std::map<int, ClassRole> registry;
  if (sidecar.contains("train_registry")) registry = registry_from_json(sidecar["train_registry"]);
  if (model.dim() != test_set.dim) {
    throw ConfigError("checkpoint dimension " + std::to_string(model.dim()) + " does not match dataset dimension " +
                      std::to_string(test_set.dim));
  }

  auto t0 = std::chrono::steady_clock::now();
  MetricsRecord m = evaluate(model, registry, test_set, eval_options(config, config.seed));
  ResultRow row = make_row(sidecar.value("scenario_id", std::string("unknown")),
                           sidecar.value("method", std::string("proposed")),
                           sidecar.value("added_unlabeled_classes", 0), sidecar.value("beta", 0.0),
                           sidecar.value("epoch", 0), config.seed, "test", m, seconds_since(t0), config);

  OutputDir out(config.out);
  std::string table;
  if (fs::exists(out.path("eval.csv"))) {
    table = read_file(out.path("eval.csv"));
    if (table.rfind(csv_header() + "\n", 0) != 0) {
      throw ParseError(out.path("eval.csv").string() + ": existing file has a different header", 1);
    }
  } else {
    table = csv_header() + "\n";
  }
  table += format_row(row) + "\n";
  out.write("eval.csv", table);
  echo_config(out, config);
  print(csv_header() + "\n" + format_row(row) + "\n");
  return kExitOk;
}

int cmd_sweep_beta(const RunConfig& config) {
  OutputDir out(config.out);
  const int added = config.resolved_train_added();
  const std::string id = config.scenario.name + "-" + std::string(mode_name(config.scenario.mode));
  const auto& grid = config.sweep.grid;

  std::vector<SeedSweep> sweeps;
  for (std::uint64_t seed : config.seeds(config.sweep.repeats)) sweeps.push_back(run_sweep_seed(config, seed));

  std::vector<ResultRow> rows;
  json summary;
  summary["scenario_id"] = id;
  summary["added_unlabeled_classes"] = added;
  summary["grid"] = grid;
  summary["early_metric"] = config.training.early_metric == EarlyMetric::kNce ? "nce" : "accuracy";
  summary["seeds"] = json::array();
  int interior = 0;
  for (const SeedSweep& s : sweeps) {
    json per_seed = {{"seed", s.seed},
                     {"selected_beta", s.entries[s.selected].beta},
                     {"selected_epoch", s.entries[s.selected].best_epoch},
                     {"interior", s.interior()},
                     {"entries", json::array()}};
    interior += s.interior() ? 1 : 0;
    for (const EntryReport& e : s.entries) {
      json je = {{"beta", e.beta}, {"ok", e.ok}};
      if (!e.ok) {
        je["error"] = e.error;
        per_seed["entries"].push_back(je);
        continue;
      }
      for (const EpochRecord& r : e.history) {
        rows.push_back(make_row(id, "proposed", added, e.beta, r.epoch, s.seed, "validation", r.validation, 0.0,
                                config));
      }
      rows.push_back(make_row(id, "proposed", added, e.beta, e.best_epoch, s.seed, "test", e.test, e.seconds, config));
      je["best_epoch"] = e.best_epoch;
      je["validation"] = metrics_json(e.validation);
      je["test"] = metrics_json(e.test);
      per_seed["entries"].push_back(je);
    }
    summary["seeds"].push_back(per_seed);
  }
  summary["interior_selections"] = interior;
  summary["seed_count"] = sweeps.size();

  // Seed-averaged curves over the successful entries.
  std::vector<Panel> panels(2);
  panels[0] = {"Accuracy", "log10 beta", "accuracy", {}};
  panels[1] = {"Negative cross-entropy", "log10 beta", "NCE", {}};
  for (int metric = 0; metric < 2; ++metric) {
    Series val{"validation", "#1f77b4", false, {}, std::nullopt};
    Series test{"test", "#d62728", false, {}, std::nullopt};
    Series ref0{"beta = 0 (test)", "#000000", true, {}, std::nullopt};
    Series ref1{"beta = 1 (test)", "#7f7f7f", true, {}, std::nullopt};
    for (std::size_t g = 0; g < grid.size(); ++g) {
      double vs = 0, ts = 0;
      int n = 0;
      for (const SeedSweep& s : sweeps) {
        const EntryReport& e = s.entries[g];
        if (!e.ok) continue;
        vs += metric == 0 ? e.validation.accuracy : e.validation.negative_cross_entropy;
        ts += metric == 0 ? e.test.accuracy : e.test.negative_cross_entropy;
        ++n;
      }
      if (n == 0) continue;
      if (grid[g] == 0.0) {
        ref0.level = ts / n;
      } else {
        if (grid[g] == 1.0) ref1.level = ts / n;
        val.points.emplace_back(std::log10(grid[g]), vs / n);
        test.points.emplace_back(std::log10(grid[g]), ts / n);
      }
    }
    if (!val.points.empty()) {
      panels[metric].series.push_back(val);
      panels[metric].series.push_back(test);
    }
    if (ref0.level) panels[metric].series.push_back(ref0);
    if (ref1.level) panels[metric].series.push_back(ref1);
  }

  out.write("sweep.csv", format_table(rows));
  out.write("sweep_summary.json", summary.dump(2) + "\n");
  out.write("sweep.svg", render_svg("beta sweep: " + id, panels));
  echo_config(out, config);
  print(summary.dump(2) + "\n");
  return kExitOk;
}

int cmd_scenario_curve(const RunConfig& config) {
  OutputDir out(config.out);
  const std::string id = config.scenario.name + "-" + std::string(mode_name(config.scenario.mode));
  std::vector<CurvePoint> all;
  for (std::uint64_t seed : config.seeds(config.curve.repeats)) {
    std::vector<CurvePoint> pts = run_curve_seed(config, seed);
    all.insert(all.end(), pts.begin(), pts.end());
  }

  std::vector<ResultRow> rows;
  for (const CurvePoint& p : all) {
    for (int m = 0; m < 2; ++m) {
      const MethodPoint& mp = m == 0 ? p.proposed : p.baseline;
      const std::string method = m == 0 ? "proposed" : "baseline";
      rows.push_back(make_row(id, method, p.added, mp.beta, mp.epoch, p.seed, "validation", mp.validation, 0.0, config));
      rows.push_back(make_row(id, method, p.added, mp.beta, mp.epoch, p.seed, "test", mp.test, mp.seconds, config));
    }
  }

  // Mean and standard error over seeds per (method, added).
  json summary;
  summary["scenario_id"] = id;
  summary["points"] = json::array();
  std::vector<Panel> panels(2);
  panels[0] = {"Accuracy", "added unlabeled classes", "accuracy", {}};
  panels[1] = {"Negative cross-entropy", "added unlabeled classes", "NCE", {}};
  Series proposed_series[2] = {{"proposed", "#d62728", false, {}, std::nullopt},
                               {"proposed", "#d62728", false, {}, std::nullopt}};
  Series baseline_series[2] = {{"baseline", "#000000", false, {}, std::nullopt},
                               {"baseline", "#000000", false, {}, std::nullopt}};
  for (int added : config.scenario.added_unlabeled_classes) {
    json jp = {{"added_unlabeled_classes", added}};
    for (int m = 0; m < 2; ++m) {
      std::vector<double> acc, nce;
      for (const CurvePoint& p : all) {
        if (p.added != added) continue;
        const MethodPoint& mp = m == 0 ? p.proposed : p.baseline;
        acc.push_back(mp.test.accuracy);
        nce.push_back(mp.test.negative_cross_entropy);
      }
      auto stats = [](const std::vector<double>& v) {
        double mean = 0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0;
        for (double x : v) ss += (x - mean) * (x - mean);
        double se = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))
                                 : 0.0;
        return std::pair<double, double>(mean, se);
      };
      auto [am, ase] = stats(acc);
      auto [nm, nse] = stats(nce);
      jp[m == 0 ? "proposed" : "baseline"] = {{"accuracy_mean", am},
                                              {"accuracy_se", ase},
                                              {"negative_cross_entropy_mean", nm},
                                              {"negative_cross_entropy_se", nse}};
      Series* s = m == 0 ? proposed_series : baseline_series;
      s[0].points.emplace_back(added, am);
      s[1].points.emplace_back(added, nm);
    }
    summary["points"].push_back(jp);
  }
  for (int k = 0; k < 2; ++k) {
    panels[k].series.push_back(proposed_series[k]);
    panels[k].series.push_back(baseline_series[k]);
  }

  out.write("curve.csv", format_table(rows));
  out.write("curve_summary.json", summary.dump(2) + "\n");
  out.write("curve.svg", render_svg("unlabeled classes: " + id, panels));
  echo_config(out, config);
  print(summary.dump(2) + "\n");
  return kExitOk;
}

int cmd_sample(const RunConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("sample needs a checkpoint (--checkpoint)");
  FlowModel model = load_checkpoint(config.checkpoint);
  Rng rng(config.seed, 9);
  std::vector<Vector> xs = sample(model, rng, config.sample_count);
  std::string csv;
  for (int j = 0; j < model.dim(); ++j) csv += (j ? ",f" : "f") + std::to_string(j);
  csv += "\n";
  for (const Vector& x : xs) {
    if (!x.allFinite()) throw NumericError("sampled a non-finite vector");
    for (int j = 0; j < x.size(); ++j) csv += (j ? "," : "") + format_number(x(j));
    csv += "\n";
  }
  OutputDir out(config.out);
  out.write("samples.csv", csv);
  echo_config(out, config);
  spdlog::info("wrote {} samples", xs.size());
  return kExitOk;
}

int run_command(const std::string& name, const RunConfig& config) {
  if (name == "gen-data") return cmd_gen_data(config);
  if (name == "train") return cmd_train(config);
  if (name == "eval") return cmd_eval(config);
  if (name == "sweep-beta") return cmd_sweep_beta(config);
  if (name == "scenario-curve") return cmd_scenario_curve(config);
  if (name == "sample") return cmd_sample(config);
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace flowproto::cli
