// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <string>

#include "CLI11.hpp"
#include "atd/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Bimodal fusion laboratory: synthetic data, training, evaluation, gradient checks"};
  app.require_subcommand(1);

  std::string config_path, index_path;
  std::uint64_t seed = 1;
  std::size_t seeds = 1;
  std::string fault;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic bimodal dataset into out.dir");
  synth->add_option("config", config_path, "Run configuration (key=value)")->required();

  auto* train = app.add_subcommand("train", "Train a model and write parameters and reports to out.dir");
  train->add_option("config", config_path, "Run configuration (key=value)")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate saved parameters on the configured split");
  eval->add_option("config", config_path, "Run configuration (key=value)")->required();
  eval->add_option("params", index_path, "Parameter index written by train")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable component");
  gradcheck->add_option("--seed", seed, "First seed");
  gradcheck->add_option("--seeds", seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  gradcheck->add_option("--inject-fault", fault, "Corrupt one op's backward rule (negative control)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : atd::cli::kConfigError;
  }

  if (*synth) return atd::cli::cmd_synth(config_path);
  if (*train) return atd::cli::cmd_train(config_path);
  if (*eval) return atd::cli::cmd_eval(config_path, index_path);
  return atd::cli::cmd_gradcheck(seed, seeds, fault);
}
