// Command-line front end: synth, train, retrieve, evaluate, gradcheck and
// dump-masks.

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sbnet/sbnet.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Natural-language vehicle retrieval toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  app.add_option("--config", config_path, "Flat key = value config file");
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--output", output, "Output directory");

  std::map<std::string, std::string> overrides;
  for (const auto& key : sbnet::RunConfig::keys()) {
    if (key == "seed" || key == "output") continue;
    app.add_option_function<std::string>("--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; },
                                         "Override config key '" + key + "'");
  }

  auto* synth = app.add_subcommand("synth", "Render a synthetic corpus");
  auto* train = app.add_subcommand("train", "Train on a tracks file");
  auto* retrieve = app.add_subcommand("retrieve", "Rank candidate tracks for each query");
  auto* evaluate = app.add_subcommand("evaluate", "MRR and Recall@K of a ranking");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every module chain");
  auto* dump = app.add_subcommand("dump-masks", "Write predicted masks as PNGs");
  std::vector<std::size_t> ks{1, 5, 10};
  evaluate->add_option("--k", ks, "Recall cut-offs")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    sbnet::RunConfig config;
    if (!config_path.empty()) config = sbnet::RunConfig::load(config_path);
    if (auto it = overrides.find("preset"); it != overrides.end()) config.set("preset", it->second);
    for (const auto& [k, v] : overrides) {
      if (k != "preset") config.set(k, v);
    }
    if (seed) config.seed = *seed;
    if (output) config.output = *output;
    config.validate();

    if (synth->parsed()) {
      sbnet::run_synth(config);
    } else if (train->parsed()) {
      const auto history = sbnet::run_train(config);
      std::cout << sbnet::csv_header();
      for (const auto& e : history) std::cout << sbnet::csv_row(e);
    } else if (retrieve->parsed()) {
      const auto result = sbnet::run_retrieve(config);
      std::cout << "ranked " << result.ranking.size() << " queries\n";
    } else if (evaluate->parsed()) {
      std::cout << sbnet::metrics_csv(sbnet::run_evaluate(config, ks));
    } else if (gradcheck->parsed()) {
      return sbnet::run_gradcheck(sbnet::default_gradcheck_modules(config.model), std::cout);
    } else if (dump->parsed()) {
      std::cout << "wrote " << sbnet::run_dump_masks(config) << " masks\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
