#include "cli/commands.hpp"
#include "cli/run_config.hpp"

#include "flowproto/errors.hpp"
#include "flowproto/io.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

using nlohmann::json;
namespace cli = flowproto::cli;

int main(int argc, char** argv) {
  CLI::App app{"flowproto: hybrid normalizing-flow prototype classifier"};
  app.require_subcommand(1, 1);

  std::string config_path, out, checkpoint, dataset;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs, episodes, n;
  std::optional<double> beta;

  const char* commands[][2] = {
      {"gen-data", "generate the scenario datasets"},
      {"train", "train one model"},
      {"eval", "evaluate a checkpoint on a dataset"},
      {"sweep-beta", "train over the beta grid and select on validation"},
      {"scenario-curve", "proposed vs baseline across added unlabeled classes"},
      {"sample", "draw samples from a checkpoint"},
  };
  for (auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "RunConfig JSON");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "seed");
    sub->add_option("--jobs", jobs, "parallel grid entries / scenario points");
    sub->add_option("--beta", beta, "override beta");
    sub->add_option("--episodes", episodes, "evaluation episodes");
    sub->add_option("--checkpoint", checkpoint, "checkpoint path");
    sub->add_option("--dataset", dataset, "dataset file or gen-data directory");
    sub->add_option("--n", n, "number of samples");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const char* level = std::getenv("FLOWPROTO_LOG");
    cli::init_logging(level ? level : "info");
    json doc = json::object();
    if (!config_path.empty()) {
      // Parsed twice: once strictly for errors, once as a document to overlay.
      cli::load_run_config(config_path);
      doc = json::parse(flowproto::read_file(config_path));
    }
    if (!out.empty()) doc["out"] = out;
    if (seed) doc["seed"] = *seed;
    if (jobs) doc["jobs"] = *jobs;
    if (beta) {
      doc["training"]["beta"] = *beta;
      if (command == "scenario-curve") doc["curve"]["beta"] = *beta;
    }
    if (episodes) doc["evaluation"]["episodes"] = *episodes;
    if (!checkpoint.empty()) doc["checkpoint"] = checkpoint;
    if (!dataset.empty()) doc["dataset"] = dataset;
    if (n) doc["sample"]["n"] = *n;
    cli::RunConfig config = cli::parse_run_config(doc);
    return cli::run_command(command, config);
  } catch (const std::exception& e) {
    std::cerr << "flowproto " << command << ": error: " << e.what() << "\n";
    return cli::exit_code_for(e);
  }
}
