#include <doctest.h>

#include "cli/commands.hpp"
#include "cli/report.hpp"
#include "cli/run_config.hpp"

#include "flowproto/checkpoint.hpp"
#include "flowproto/errors.hpp"
#include "flowproto/io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace flowproto;
using namespace flowproto::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const bool quiet = [] {
  set_console(nullptr);
  init_logging("error");
  return true;
}();

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("flowproto_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

json tiny_doc(const fs::path& out) {
  return json{{"out", out.string()},
              {"generator", {{"examples_per_class", 40}}},
              {"scenario",
               {{"labeled_classes", 6},
                {"labeled_per_class", 20},
                {"added_unlabeled_classes", {0, 2}},
                {"examples_per_added_class", 30},
                {"validation_classes", 5},
                {"test_classes", 5}}},
              {"training",
               {{"epochs", 2},
                {"episodes_per_epoch", 3},
                {"validation_episodes", 20},
                {"flow", {{"blocks", 1}, {"couplings_per_block", 2}, {"hidden", 8}}}}},
              {"evaluation", {{"episodes", 40}}}};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  return out;
}

}  // namespace

TEST_CASE("config: empty document gives the documented defaults") {
  RunConfig c = parse_run_config(json::object());
  CHECK(c.seed == 1);
  CHECK(c.jobs == 1);
  CHECK(c.training.beta == 0.0);
  CHECK(c.evaluation.episodes == 2000);
  CHECK(c.sweep.grid == std::vector<double>{0.0, 1e-3, 1e-2, 1e-1, 1.0});
  CHECK(c.scenario.added_unlabeled_classes == std::vector<int>{0, 2, 4, 6});
  CHECK(c.generator.n_classes == c.scenario.labeled_classes + 6 + c.scenario.validation_classes +
                                     c.scenario.test_classes);
  CHECK(c.resolved_train_added() == 6);
}

TEST_CASE("config: strict parsing names the offending key") {
  auto message = [](const json& doc) {
    try {
      parse_run_config(doc);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message({{"bogus", 1}}) == "unknown key 'bogus'");
  CHECK(message({{"training", {{"optimizer", {{"momentum", 0.9}}}}}}) ==
        "unknown key 'training.optimizer.momentum'");
  CHECK(message({{"training", {{"epochs", 1.5}}}}) == "'training.epochs' must be an integer");
  CHECK(message({{"seed", -3}}) == "'seed' must be a non-negative integer");
  CHECK(message({{"scenario", {{"mode", "sideways"}}}}).find("scenario.mode: unknown value 'sideways'") == 0);
  CHECK(message({{"sweep", {{"grid", {0, 1}}}}}).find("differs from preset 'desk'") != std::string::npos);
  CHECK(message({{"training", {{"beta", -1.0}}}}) != "no error");
  CHECK(message({{"train_added", 3}}) != "no error");
  CHECK(message({{"generator", 5}}) == "'generator' must be an object");
  CHECK(message(json::array()) == "config must be an object");
}

TEST_CASE("config: echo parses back to itself") {
  json doc = tiny_doc("x");
  doc["training"]["unlabeled_batch"] = 7;
  doc["scenario"]["mode"] = "overlap";
  doc["scenario"]["labeled_fraction"] = 0.4;
  doc["curve"] = {{"beta", 0.01}};
  doc["sweep"] = {{"preset", "paper"}};
  RunConfig c = parse_run_config(doc);
  json echoed = to_json(c);
  RunConfig again = parse_run_config(echoed);
  CHECK(to_json(again) == echoed);
  CHECK(again.training.unlabeled_batch == 7);
  CHECK(again.scenario.labeled_fraction == 0.4);
  CHECK(again.curve.beta == 0.01);

  json with_auto = to_json(parse_run_config(tiny_doc("x")));
  CHECK(with_auto["training"]["unlabeled_batch"] == "auto");
  CHECK(with_auto["curve"]["beta"].is_null());
}

TEST_CASE("config: grid presets") {
  CHECK(grid_preset("paper") == std::vector<double>{0.0, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1.0});
  CHECK_THROWS_AS(grid_preset("huge"), ConfigError);
  RunConfig c = parse_run_config({{"sweep", {{"preset", "custom"}, {"grid", {0, 0.5}}}}});
  CHECK(c.sweep.grid == std::vector<double>{0.0, 0.5});
}

TEST_CASE("results table: header and number formatting are pinned") {
  CHECK(csv_header() ==
        "scenario_id,method,added_unlabeled_classes,beta,epoch,seed,split,episodes,accuracy,"
        "negative_cross_entropy,wall_clock_seconds");
  ResultRow r;
  r.scenario_id = "reference-disjoint";
  r.method = "baseline";
  r.added_unlabeled_classes = 4;
  r.beta = 1e-5;
  r.epoch = 17;
  r.seed = 3;
  r.split = "test";
  r.episodes = 2000;
  r.accuracy = 0.123456789012;
  r.negative_cross_entropy = -1.0 / 3.0;
  r.wall_clock_seconds = 0.0;
  CHECK(format_row(r) == "reference-disjoint,baseline,4,1e-05,17,3,test,2000,0.123456789,-0.333333333,0");
  CHECK(format_table({r, r}) == csv_header() + "\n" + format_row(r) + "\n" + format_row(r) + "\n");
  CHECK(format_number(1e-4) == "0.0001");
  CHECK(format_number(12345678901.0) == "1.23456789e+10");
}

TEST_CASE("svg: deterministic, dashed reference lines, degenerate panels") {
  Panel p{"Accuracy", "log10 beta", "accuracy", {}};
  p.series.push_back({"test", "#d62728", false, {{-3, 0.9}, {-2, 0.95}, {-1, 0.93}}, std::nullopt});
  p.series.push_back({"beta = 0", "#000000", true, {}, 0.91});
  std::string a = render_svg("t", {p, p});
  CHECK(a == render_svg("t", {p, p}));
  CHECK(a.rfind("<?xml", 0) == 0);
  CHECK(a.find("version=\"1.1\"") != std::string::npos);
  CHECK(a.find("stroke-dasharray") != std::string::npos);
  CHECK(a.find("<polyline") != std::string::npos);

  Panel ref_only{"Accuracy", "log10 beta", "accuracy", {{"beta = 0", "#000000", true, {}, 0.91}}};
  std::string b = render_svg("t <&>", {ref_only});
  CHECK(b.find("<polyline") == std::string::npos);
  CHECK(b.find("stroke-dasharray") != std::string::npos);
  CHECK(b.find("t &lt;&amp;&gt;") != std::string::npos);
}

TEST_CASE("gen-data: one train file per scenario point, deterministic bytes") {
  fs::path dir = fresh_dir("gen");
  RunConfig c = parse_run_config(tiny_doc(dir / "a"));
  CHECK(cmd_gen_data(c) == 0);
  int train_files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    if (e.path().filename().string().rfind("train_added_", 0) == 0) ++train_files;
  }
  CHECK(train_files == 2);
  CHECK(fs::exists(dir / "a" / "validation.fpds"));
  CHECK(fs::exists(dir / "a" / "test.fpds"));
  CHECK(fs::exists(dir / "a" / "manifest.json"));

  c.out = (dir / "b").string();
  CHECK(cmd_gen_data(c) == 0);
  for (const char* f : {"train_added_0.fpds", "train_added_2.fpds", "validation.fpds", "test.fpds", "manifest.json"}) {
    CHECK(read_file(dir / "a" / f) == read_file(dir / "b" / f));
  }
  fs::remove_all(dir);
}

TEST_CASE("gen-data: unwritable output leaves nothing behind") {
  fs::path dir = fresh_dir("unwritable");
  fs::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  RunConfig c = parse_run_config(tiny_doc(dir / "file" / "sub"));
  CHECK_THROWS_AS(cmd_gen_data(c), IoError);
  CHECK(!fs::exists(dir / "file" / "sub"));

  // A directory that exists but rejects writes: earlier files are removed.
  fs::create_directories(dir / "ro");
  fs::permissions(dir / "ro", fs::perms::owner_read | fs::perms::owner_exec);
  if (::access((dir / "ro").c_str(), W_OK) != 0) {
    c.out = (dir / "ro").string();
    CHECK_THROWS_AS(cmd_gen_data(c), IoError);
    CHECK(fs::is_empty(dir / "ro"));
  }
  fs::permissions(dir / "ro", fs::perms::owner_all);
  fs::remove_all(dir);
}

TEST_CASE("train: epochs=1 emits one training and one validation row") {
  fs::path dir = fresh_dir("train1");
  json doc = tiny_doc(dir);
  doc["training"]["epochs"] = 1;
  RunConfig c = parse_run_config(doc);
  CHECK(cmd_train(c) == 0);
  auto rows = lines_of(read_file(dir / "train.csv"));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == csv_header());
  CHECK(split_csv(rows[1])[6] == "train");
  CHECK(split_csv(rows[2])[6] == "validation");
  CHECK(split_csv(rows[1])[4] == "1");
  CHECK(fs::exists(dir / "model.fpro"));
  CHECK(fs::exists(dir / "model.fpro.json"));
  CHECK(fs::exists(dir / "effective_config.json"));
  fs::remove_all(dir);
}

TEST_CASE("train: beta=0 metrics equal the discriminative-only sweep entry") {
  // The sweep's beta = 0 entry shares seed and data with a plain train run.
  fs::path dir = fresh_dir("beta0");
  json doc = tiny_doc(dir / "train");
  RunConfig c = parse_run_config(doc);
  CHECK(cmd_train(c) == 0);
  c.out = (dir / "sweep").string();
  c.sweep.preset = "custom";
  c.sweep.grid = {0.0};
  CHECK(cmd_sweep_beta(c) == 0);
  auto train_rows = lines_of(read_file(dir / "train" / "train.csv"));
  auto sweep_rows = lines_of(read_file(dir / "sweep" / "sweep.csv"));
  std::vector<std::string> train_val, sweep_val;
  for (const auto& l : train_rows) {
    if (l.find(",validation,") != std::string::npos) train_val.push_back(l);
  }
  for (const auto& l : sweep_rows) {
    if (l.find(",validation,") != std::string::npos) sweep_val.push_back(l);
  }
  CHECK(train_val.size() == 2);
  CHECK(train_val == sweep_val);
  fs::remove_all(dir);
}

TEST_CASE("eval: deterministic per seed, rejects overlapping registries") {
  fs::path dir = fresh_dir("eval");
  RunConfig c = parse_run_config(tiny_doc(dir / "train"));
  CHECK(cmd_train(c) == 0);
  RunConfig e = c;
  e.out = (dir / "eval").string();
  e.checkpoint = (dir / "train" / "model.fpro").string();
  e.dataset = (dir / "train" / "test.fpds").string();
  CHECK(cmd_eval(e) == 0);
  CHECK(cmd_eval(e) == 0);
  auto rows = lines_of(read_file(dir / "eval" / "eval.csv"));
  REQUIRE(rows.size() == 3);
  CHECK(rows[1] == rows[2]);
  CHECK(split_csv(rows[1])[7] == "40");

  RunConfig g = c;
  g.out = (dir / "gen").string();
  CHECK(cmd_gen_data(g) == 0);
  e.dataset = (dir / "gen" / "train_added_2.fpds").string();
  CHECK_THROWS_AS(cmd_eval(e), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("sweep-beta: singleton grid and the \"paper\" grid preset") {
  fs::path dir = fresh_dir("sweep");
  json doc = tiny_doc(dir / "single");
  doc["sweep"] = {{"preset", "custom"}, {"grid", {0}}};
  RunConfig c = parse_run_config(doc);
  CHECK(cmd_sweep_beta(c) == 0);
  auto rows = lines_of(read_file(dir / "single" / "sweep.csv"));
  int val_rows = 0, test_rows = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    auto f = split_csv(rows[i]);
    val_rows += f[6] == "validation";
    test_rows += f[6] == "test";
  }
  CHECK(val_rows == 2);  // one per epoch
  CHECK(test_rows == 1);
  std::string svg = read_file(dir / "single" / "sweep.svg");
  CHECK(svg.find("<polyline") == std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);

  doc = tiny_doc(dir / "paper");
  doc["sweep"] = {{"preset", "paper"}};
  doc["training"]["epochs"] = 1;
  c = parse_run_config(doc);
  CHECK(cmd_sweep_beta(c) == 0);
  std::set<double> betas;
  rows = lines_of(read_file(dir / "paper" / "sweep.csv"));
  for (std::size_t i = 1; i < rows.size(); ++i) betas.insert(std::stod(split_csv(rows[i])[3]));
  for (double b : {1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9}) CHECK(betas.count(b) == 1);
  json summary = json::parse(read_file(dir / "paper" / "sweep_summary.json"));
  CHECK(summary["grid"].size() == 8);
  fs::remove_all(dir);
}

TEST_CASE("sweep-beta: failed entries are recorded, exit stays 0") {
  fs::path dir = fresh_dir("sweepfail");
  json doc = tiny_doc(dir);
  doc["sweep"] = {{"preset", "custom"}, {"grid", {0, 1e308}}};
  RunConfig c = parse_run_config(doc);
  CHECK(cmd_sweep_beta(c) == 0);
  json summary = json::parse(read_file(dir / "sweep_summary.json"));
  auto entries = summary["seeds"][0]["entries"];
  CHECK(entries[0]["ok"] == true);
  CHECK(entries[1]["ok"] == false);
  CHECK(entries[1]["error"].get<std::string>().find("epoch 1 step 1") != std::string::npos);

  doc["sweep"]["grid"] = {1e308};
  c = parse_run_config(doc);
  CHECK_THROWS_AS(cmd_sweep_beta(c), NumericError);
  fs::remove_all(dir);
}

TEST_CASE("scenario-curve: no unlabeled data makes both methods coincide") {
  json doc = tiny_doc("unused");
  doc["scenario"]["added_unlabeled_classes"] = {0};
  doc["curve"] = {{"beta", 0.0}};
  RunConfig c = parse_run_config(doc);
  auto pts = run_curve_seed(c, 1);
  REQUIRE(pts.size() == 1);
  CHECK(pts[0].proposed.test.accuracy == pts[0].baseline.test.accuracy);
  CHECK(pts[0].proposed.test.negative_cross_entropy == pts[0].baseline.test.negative_cross_entropy);
  CHECK(pts[0].proposed.epoch == pts[0].baseline.epoch);
}

TEST_CASE("scenario-curve: refinement applies to the baseline only") {
  json doc = tiny_doc("unused");
  doc["scenario"]["added_unlabeled_classes"] = {2};
  doc["curve"] = {{"beta", 0.01}, {"baseline_refine_iterations", 0}};
  auto plain = run_curve_seed(parse_run_config(doc), 1);
  doc["curve"]["baseline_refine_iterations"] = 2;
  auto refined = run_curve_seed(parse_run_config(doc), 1);
  CHECK(plain[0].proposed.test.negative_cross_entropy == refined[0].proposed.test.negative_cross_entropy);
  CHECK(plain[0].baseline.test.negative_cross_entropy != refined[0].baseline.test.negative_cross_entropy);
}

TEST_CASE("scenario-curve: rows for both methods at every point") {
  fs::path dir = fresh_dir("curve");
  json doc = tiny_doc(dir);
  doc["curve"] = {{"beta", 0.01}, {"repeats", 2}};
  RunConfig c = parse_run_config(doc);
  CHECK(cmd_scenario_curve(c) == 0);
  auto rows = lines_of(read_file(dir / "curve.csv"));
  CHECK(rows.size() == 1 + 2 * 2 * 2 * 2);  // seeds x points x methods x splits
  std::string svg = read_file(dir / "curve.svg");
  CHECK(svg.find("#d62728") != std::string::npos);
  CHECK(svg.find("#000000") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("sample: header-only for n=0, identity checkpoint is standard normal") {
  fs::path dir = fresh_dir("sample");
  fs::create_directories(dir);
  save_checkpoint(FlowModel(3), dir / "identity.fpro");
  RunConfig c = parse_run_config(tiny_doc(dir / "zero"));
  c.checkpoint = (dir / "identity.fpro").string();
  c.sample_count = 0;
  CHECK(cmd_sample(c) == 0);
  CHECK(read_file(dir / "zero" / "samples.csv") == "f0,f1,f2\n");

  c.out = (dir / "many").string();
  c.sample_count = 20000;
  CHECK(cmd_sample(c) == 0);
  auto rows = lines_of(read_file(dir / "many" / "samples.csv"));
  REQUIRE(rows.size() == 20001);
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    auto f = split_csv(rows[i]);
    for (int j = 0; j < 3; ++j) {
      double v = std::stod(f[j]);
      sum[j] += v;
      sq[j] += v * v;
    }
  }
  const double n = 20000;
  for (int j = 0; j < 3; ++j) {
    // Sampling SE of the mean is 0.007 and of the second moment 0.01.
    CHECK(std::abs(sum[j] / n) < 0.035);
    CHECK(std::abs(sq[j] / n - 1.0) < 0.05);
  }
  fs::remove_all(dir);
}

TEST_CASE("determinism: rerunning from the echoed config reproduces every file") {
  fs::path dir = fresh_dir("rerun");
  json doc = tiny_doc(dir / "first");
  doc["sweep"] = {{"preset", "custom"}, {"grid", {0, 0.1}}};
  RunConfig c = parse_run_config(doc);
  CHECK(cmd_sweep_beta(c) == 0);
  CHECK(cmd_train(c) == 0);
  RunConfig again = load_run_config(dir / "first" / "effective_config.json");
  again.out = (dir / "second").string();
  CHECK(cmd_sweep_beta(again) == 0);
  CHECK(cmd_train(again) == 0);
  for (const char* f : {"sweep.csv", "sweep.svg", "sweep_summary.json", "train.csv", "model.fpro", "model.fpro.json",
                        "test.fpds"}) {
    CHECK_MESSAGE(read_file(dir / "first" / f) == read_file(dir / "second" / f), f);
  }
  fs::remove_all(dir);
}
