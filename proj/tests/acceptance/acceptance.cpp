// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance                 run every criterion
//   acceptance --criterion N   run criterion N only
//
// Exit status is 0 only if every selected criterion passes.
#include "cli/commands.hpp"
#include "cli/run_config.hpp"

#include "flowproto/checkpoint.hpp"
#include "flowproto/errors.hpp"
#include "flowproto/fewshot.hpp"
#include "flowproto/flow.hpp"
#include "flowproto/hybrid.hpp"
#include "flowproto/io.hpp"
#include "test_support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>

using namespace flowproto;
using flowproto::testing::gradient_check_error;
using flowproto::testing::random_model;
using flowproto::testing::random_vector;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

cli::RunConfig load_config(const char* name) {
  return cli::load_run_config(fs::path(FLOWPROTO_CONFIG_DIR) / name);
}

LabeledPool random_pool(int classes, int per_class, int dim, Rng& rng) {
  std::vector<Vector> xs;
  std::vector<int> ys;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Vector v = random_vector(dim, rng, -1.0, 1.0);
      v[0] += 1.5 * c;
      xs.push_back(v);
      ys.push_back(c);
    }
  }
  return LabeledPool(xs, ys);
}

std::vector<Vector> random_batch(int n, int dim, Rng& rng) {
  std::vector<Vector> out;
  for (int i = 0; i < n; ++i) out.push_back(random_vector(dim, rng, -2.0, 2.0));
  return out;
}

Outcome criterion1() {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  int pairs = 0;
  for (int d : {2, 4, 8, 16}) {
    for (int m = 0; m < 50; ++m) {
      FlowModel model = random_model(d, 2, 2, 8, rng);
      for (int i = 0; i < 5; ++i) {
        Vector x = random_vector(d, rng, -3.0, 3.0);
        Vector back = forward(model, inverse(model, x).z);
        worst = std::max(worst, (back - x).cwiseAbs().maxCoeff());
        ++pairs;
      }
    }
  }
  const double secs = elapsed(t0);
  Outcome o;
  o.pass = pairs >= 1000 && worst < 1e-8 && secs < 10.0;
  o.detail = std::to_string(pairs) + " pairs, max round-trip error " + fmt("%.3g", worst) + " (< 1e-8), " +
             fmt("%.2f", secs) + " s (< 10 s)";
  return o;
}

Outcome criterion2() {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 1 + static_cast<int>(rng.uniform_index(6));
    FlowModel model = random_model(d, 1, 4, 6, rng);
    Vector x = random_vector(d, rng, -2.0, 2.0);
    worst = std::max(worst, std::abs(inverse(model, x).log_det_inv - flowproto::testing::numeric_log_abs_det(model, x)));
  }
  FlowModel trained = flowproto::testing::trained_2d_model(7);
  const double mass = flowproto::testing::grid_mass(trained, -8.0, 8.0, 0.05);
  const double secs = elapsed(t0);
  Outcome o;
  o.pass = worst < 1e-6 && std::abs(mass - 1.0) <= 1e-2 && secs < 60.0;
  o.detail = "200 examples d<=6, max |log-det error| " + fmt("%.3g", worst) + " (< 1e-6); grid mass " +
             fmt("%.6f", mass) + " (1 +- 1e-2); " + fmt("%.2f", secs) + " s (< 60 s)";
  return o;
}

Outcome criterion3() {
  auto t0 = std::chrono::steady_clock::now();
  double worst_disc = 0.0, worst_gen = 0.0, worst_comp = 0.0;
  const int instances = 20;
  for (int t = 0; t < instances; ++t) {
    Rng rng(300 + static_cast<std::uint64_t>(t));
    const int d = 2 + t % 5;
    FlowModel model = random_model(d, 1, 2, 5, rng);
    LabeledPool pool = random_pool(3, 4, d, rng);
    Episode ep = sample_episode(pool, 2, 2, 1, rng);
    const auto unl = random_batch(3, d, rng);
    Matrix labeled = ep.stacked_inputs(d);
    Matrix all(d, labeled.cols() + 3);
    all << labeled, stack_columns(unl, d);
    const double beta = 0.3;
    FlowModel probe = model;
    const Vector theta = model.parameters();

    auto numeric = [&](const std::function<double()>& f) {
      return finite_diff_grad(
          [&](const Vector& th) {
            probe.set_parameters(th);
            return f();
          },
          theta, 1e-5);
    };
    worst_disc = std::max(worst_disc, gradient_check_error(disc_nll(model, ep).grad_theta,
                                                           numeric([&] { return disc_nll(probe, ep).loss; })));
    worst_gen = std::max(worst_gen, gradient_check_error(generative_term(model, all).grad_theta,
                                                         numeric([&] { return generative_term(probe, all).mean_log_prob; })));
    worst_comp = std::max(worst_comp, gradient_check_error(composite_loss(model, ep, unl, beta).grad_theta,
                                                           numeric([&] { return composite_loss(probe, ep, unl, beta).loss; })));
  }
  const double secs = elapsed(t0);
  Outcome o;
  o.pass = worst_disc < 1e-4 && worst_gen < 1e-4 && worst_comp < 1e-4 && secs < 120.0;
  o.detail = std::to_string(instances) + " instances each (d 2..6, C=2, K=2, Q=1); max relative error disc " +
             fmt("%.3g", worst_disc) + ", generative " + fmt("%.3g", worst_gen) + ", composite " +
             fmt("%.3g", worst_comp) + " (< 1e-4); " + fmt("%.1f", secs) + " s (< 120 s)";
  return o;
}

Outcome criterion4() {
  bool bitwise = true;
  double worst_affine = 0.0;
  for (int t = 0; t < 20; ++t) {
    Rng rng(400 + static_cast<std::uint64_t>(t));
    const int d = 2 + t % 4;
    FlowModel model = random_model(d, 1, 2, 6, rng);
    LabeledPool pool = random_pool(3, 5, d, rng);
    Episode ep = sample_episode(pool, 3, 2, 1, rng);
    const auto unl = random_batch(4, d, rng);
    DiscResult disc = disc_nll(model, ep);
    CompositeResult c0 = composite_loss(model, ep, unl, 0.0);
    bitwise = bitwise && c0.loss == disc.loss && c0.grad_theta == disc.grad_theta;
    const double l0 = c0.loss;
    const double l1 = composite_loss(model, ep, unl, 0.5).loss;
    const double l2 = composite_loss(model, ep, unl, 1.0).loss;
    worst_affine = std::max(worst_affine, std::abs(l2 - 2.0 * l1 + l0));
  }
  Outcome o;
  o.pass = bitwise && worst_affine < 1e-12;
  o.detail = std::string("beta=0 bitwise equal to disc_nll on 20 instances: ") + (bitwise ? "yes" : "no") +
             "; three-point affine residual " + fmt("%.3g", worst_affine) + " (< 1e-12)";
  return o;
}

Outcome criterion5() {
  HybridConfig c;
  c.ways = 3;
  c.shots = 2;
  c.queries = 2;
  const double tol = 1.0 / (c.ways * (c.shots + c.queries));
  bool pass = true;
  std::string detail;
  for (auto [per_class, unlabeled_n] : {std::pair{10, 0}, std::pair{10, 45}, std::pair{7, 100}}) {
    Rng rng(500 + static_cast<std::uint64_t>(unlabeled_n));
    LabeledPool pool = random_pool(4, per_class, 2, rng);
    const auto unl = random_batch(unlabeled_n, 2, rng);
    std::size_t lab = 0, used = 0;
    for (int step = 0; step < c.episodes_per_epoch; ++step) {
      Minibatch mb = make_minibatch(pool, unl, c, rng, rng);
      lab += mb.episode.support_size() + mb.episode.queries.size();
      used += mb.unlabeled.size();
    }
    const double target = static_cast<double>(unlabeled_n) / static_cast<double>(pool.size());
    const double got = static_cast<double>(used) / static_cast<double>(lab);
    pass = pass && std::abs(got - target) <= tol;
    detail += "L=" + std::to_string(pool.size()) + " U=" + std::to_string(unlabeled_n) + ": " + fmt("%.4f", got) +
              " vs " + fmt("%.4f", target) + "; ";
  }
  Outcome o;
  o.pass = pass;
  o.detail = detail + "tolerance 1/(C(K+Q)) = " + fmt("%.4f", tol);
  return o;
}

Outcome criterion6() {
  auto t0 = std::chrono::steady_clock::now();
  cli::RunConfig config = load_config("beta_sweep.json");
  int interior = 0, seeds = 0;
  double acc_selected = 0.0, acc_zero = 0.0;
  std::size_t zero_index = 0;
  while (config.sweep.grid[zero_index] != 0.0) ++zero_index;
  for (std::uint64_t seed : config.seeds(config.sweep.repeats)) {
    cli::SeedSweep s = cli::run_sweep_seed(config, seed);
    interior += s.interior() ? 1 : 0;
    acc_selected += s.entries[s.selected].test.accuracy;
    acc_zero += s.entries[zero_index].test.accuracy;
    ++seeds;
    std::fprintf(stderr, "  seed %llu: selected beta %g, test acc %.4f (beta=0 %.4f)\n",
                 static_cast<unsigned long long>(seed), s.entries[s.selected].beta, s.entries[s.selected].test.accuracy,
                 s.entries[zero_index].test.accuracy);
  }
  acc_selected /= seeds;
  acc_zero /= seeds;
  const double secs = elapsed(t0);
  Outcome o;
  o.pass = seeds >= 10 && interior * 10 >= 6 * seeds && acc_selected >= acc_zero && secs < 1800.0;
  o.detail = "interior beta selected in " + std::to_string(interior) + "/" + std::to_string(seeds) +
             " seeds (>= 60%); mean test accuracy at selected beta " + fmt("%.4f", acc_selected) + " vs beta=0 " +
             fmt("%.4f", acc_zero) + "; " + fmt("%.0f", secs) + " s (< 1800 s)";
  return o;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  if (v.size() > 1) r.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return r;
}

Outcome criterion7() {
  auto t0 = std::chrono::steady_clock::now();
  cli::RunConfig config = load_config("disjoint_curve.json");
  const auto& counts = config.scenario.added_unlabeled_classes;
  std::vector<std::vector<double>> proposed(counts.size()), baseline(counts.size());
  int seeds = 0;
  for (std::uint64_t seed : config.seeds(config.curve.repeats)) {
    auto pts = cli::run_curve_seed(config, seed);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      proposed[i].push_back(pts[i].proposed.test.negative_cross_entropy);
      baseline[i].push_back(pts[i].baseline.test.negative_cross_entropy);
      std::fprintf(stderr, "  seed %llu added %d: proposed nce %.4f, baseline nce %.4f\n",
                   static_cast<unsigned long long>(seed), pts[i].added, pts[i].proposed.test.negative_cross_entropy,
                   pts[i].baseline.test.negative_cross_entropy);
    }
    ++seeds;
  }
  // No degradation: each step along the curve may drop by at most one
  // standard error of the seed-paired difference.
  bool monotone = true;
  std::string curve = "proposed NCE";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    MeanSe p = mean_se(proposed[i]);
    curve += " " + std::to_string(counts[i]) + ":" + fmt("%.4f", p.mean) + "+-" + fmt("%.4f", p.se);
    if (i == 0) continue;
    std::vector<double> diff;
    for (std::size_t s = 0; s < proposed[i].size(); ++s) diff.push_back(proposed[i][s] - proposed[i - 1][s]);
    MeanSe d = mean_se(diff);
    if (d.mean < -d.se) monotone = false;
  }
  const MeanSe b0 = mean_se(baseline.front()), bmax = mean_se(baseline.back());
  const bool baseline_ok = bmax.mean <= b0.mean;
  const double secs = elapsed(t0);
  Outcome o;
  o.pass = seeds >= 10 && monotone && baseline_ok && secs < 2700.0;
  o.detail = std::to_string(seeds) + " seeds; " + curve + (monotone ? " (non-decreasing within 1 SE)" : " (DEGRADES)") +
             "; baseline NCE " + fmt("%.4f", b0.mean) + " at 0 -> " + fmt("%.4f", bmax.mean) + " at max" +
             (baseline_ok ? " (not above)" : " (ABOVE)") + "; " + fmt("%.0f", secs) + " s (< 2700 s)";
  return o;
}

Outcome criterion8() {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(808);
  Vector mean_a(2), mean_b(2);
  mean_a << -3.0, 0.0;
  mean_b << 3.0, 0.0;
  std::vector<Vector> unlabeled;
  for (int i = 0; i < 200; ++i) {
    Vector noise(2);
    noise << rng.standard_normal(), rng.standard_normal();
    unlabeled.push_back((i % 2 ? mean_b : mean_a) + 0.5 * noise);
  }
  Vector a1(2), a2(2), b1(2), b2(2);
  a1 << -2.0, 0.5;
  a2 << -1.6, 0.3;
  b1 << 1.8, -0.4;
  b2 << 2.2, 0.2;
  PrototypeSet start = compute_prototypes({{a1, a2}, {b1, b2}});
  PrototypeSet refined = soft_kmeans_refine(start, unlabeled, 1);
  const double da0 = (start.prototypes.col(0) - mean_a).norm(), da1 = (refined.prototypes.col(0) - mean_a).norm();
  const double db0 = (start.prototypes.col(1) - mean_b).norm(), db1 = (refined.prototypes.col(1) - mean_b).norm();
  const double secs = elapsed(t0);
  Outcome o;
  o.pass = da1 < da0 && db1 < db0 && secs < 1.0;
  o.detail = "distance to true means " + fmt("%.4f", da0) + " -> " + fmt("%.4f", da1) + " and " + fmt("%.4f", db0) +
             " -> " + fmt("%.4f", db1) + "; " + fmt("%.3f", secs) + " s (< 1 s)";
  return o;
}

Outcome criterion9() {
  fs::path root = fs::temp_directory_path() / ("flowproto_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  cli::RunConfig base = load_config("determinism.json");
  const std::vector<std::string> commands = {"gen-data", "train", "eval", "sweep-beta", "scenario-curve", "sample"};
  bool pass = true;
  int compared = 0;
  std::string mismatches;
  auto configure = [&](cli::RunConfig c, const std::string& cmd, const fs::path& out) {
    c.out = out.string();
    if (cmd == "eval" || cmd == "sample") {
      c.checkpoint = (root / "train_a" / "model.fpro").string();
      c.dataset = (root / "train_a" / "test.fpds").string();
    }
    return c;
  };
  for (const std::string& cmd : commands) {
    fs::path a = root / (cmd + "_a"), b = root / (cmd + "_b");
    cli::run_command(cmd, configure(base, cmd, a));
    // Second run: only the echoed config, redirected to a fresh directory.
    cli::RunConfig echoed = cli::load_run_config(a / "effective_config.json");
    echoed.out = b.string();
    cli::run_command(cmd, echoed);
    for (const auto& entry : fs::directory_iterator(a)) {
      const std::string name = entry.path().filename().string();
      if (name == "effective_config.json") continue;
      ++compared;
      if (!fs::exists(b / name) || read_file(entry.path()) != read_file(b / name)) {
        pass = false;
        mismatches += " " + cmd + "/" + name;
      }
    }
  }
  // Parallel grid entries do not change the sweep.
  cli::RunConfig parallel = configure(base, "sweep-beta", root / "sweep-beta_jobs");
  parallel.jobs = 3;
  cli::run_command("sweep-beta", parallel);
  for (const char* name : {"sweep.csv", "sweep.svg", "sweep_summary.json"}) {
    ++compared;
    if (read_file(root / "sweep-beta_a" / name) != read_file(root / "sweep-beta_jobs" / name)) {
      pass = false;
      mismatches += std::string(" jobs=3/") + name;
    }
  }
  fs::remove_all(root);
  Outcome o;
  o.pass = pass && compared > 0;
  o.detail = std::to_string(commands.size()) + " commands re-run from their echoed configs (plus sweep with --jobs 3); " +
             std::to_string(compared) + " files compared" + (pass ? ", all byte-identical" : ", mismatches:" + mismatches);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run one criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  cli::set_console(nullptr);
  cli::init_logging("error");

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"invertibility", criterion1},
      {"exact likelihood", criterion2},
      {"gradient correctness", criterion3},
      {"degeneration identities", criterion4},
      {"minibatch ratio", criterion5},
      {"beta sweep selects intermediate models", criterion6},
      {"added disjoint unlabeled classes", criterion7},
      {"soft k-means sanity", criterion8},
      {"determinism", criterion9},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (only && only != n) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("criterion %d (%s): %s: %s\n", n, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
