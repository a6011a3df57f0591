#include <CLI11.hpp>
#include <iostream>

#include "cdvgm/commands.hpp"
#include "cdvgm/errors.hpp"

using namespace cdvgm;

int main(int argc, char** argv) {
  CLI::App app{"CDVGM traffic forecaster"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("config", config_path, "Run config file (key = value)")->required();
  train->add_option("--set", overrides, "Override a config entry, key=value")->take_all();

  std::string checkpoint, dataset, output;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on the test split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--dataset", dataset, "Dataset file")->required();
  eval->add_option("--output", output, "Write the metrics record here");

  std::string scale = "op", corrupt;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference verification of backward rules");
  grad->add_option("--scale", scale, "op|block|model")->check(CLI::IsMember({"op", "block", "model"}));
  grad->add_option("--corrupt-op", corrupt, "Scale one op's backward rule (sensitivity check)")->group("");

  std::size_t block = 0;
  auto* exp = app.add_subcommand("export-laplacian", "Write the Laplacian seen by one block as CSV");
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  exp->add_option("--dataset", dataset, "Dataset file")->required();
  exp->add_option("--block", block, "Block index");
  exp->add_option("--output", output, "CSV path")->required();

  std::size_t nodes = 8, days = 6;
  std::uint64_t seed = 7;
  auto* synth = app.add_subcommand("synth", "Write a synthetic traffic dataset");
  synth->add_option("--nodes", nodes, "Number of nodes");
  synth->add_option("--days", days, "Number of days (288 slots each)");
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--output", output, "Dataset path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kOk : cli::kConfigError;
  }

  if (*train) {
    return cli::guarded([&] { cli::cmd_train(config_path, overrides, std::cout); }, std::cerr);
  }
  if (*eval) {
    return cli::guarded([&] { cli::cmd_eval(checkpoint, dataset, output, std::cout); }, std::cerr);
  }
  if (*grad) {
    bool ok = true;
    const int code = cli::guarded([&] { ok = cli::cmd_gradcheck(suite::parse_scale(scale), std::cout, corrupt); }, std::cerr);
    if (code != cli::kOk) return code;
    return ok ? cli::kOk : cli::kNumericError;
  }
  if (*exp) {
    return cli::guarded([&] { cli::cmd_export_laplacian(checkpoint, dataset, block, output); }, std::cerr);
  }
  if (*synth) {
    return cli::guarded([&] { cli::cmd_synth(nodes, days, seed, output); }, std::cerr);
  }
  return cli::kConfigError;
}
