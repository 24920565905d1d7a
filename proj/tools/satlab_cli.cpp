#include <CLI11.hpp>
#include <fmt/format.h>

#include <iostream>

#include "satlab/experiment.hpp"

namespace {

using namespace satlab;

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SATFormer desk laboratory: train, evaluate and analyze byte-level language models."};
  app.require_subcommand(1);

  std::string config, checkpoint, data, which = "gates", out, compare;
  bool per_head_mean = false;

  auto* train = app.add_subcommand("train", "train one model from an experiment config");
  train->add_option("--config", config, "experiment JSON")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "held-out perplexity of a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "byte corpus")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "report path (default: eval.json beside the checkpoint)");

  auto* analyze = app.add_subcommand("analyze", "gate statistics, interventions or logit lens");
  analyze->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  analyze->add_option("--data", data, "byte corpus")->required()->check(CLI::ExistingFile);
  analyze->add_option("--which", which, "gates | intervene | lens")
      ->check(CLI::IsMember({"gates", "intervene", "lens"}));
  analyze->add_option("--out", out, "output directory (default: beside the checkpoint)");
  analyze->add_option("--compare", compare, "second checkpoint for a paired lens report")->check(CLI::ExistingFile);
  analyze->add_flag("--per-head-mean", per_head_mean, "also replace each head's gate by its own mean");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of a tiny model in float64");
  gradcheck->add_option("--config", config, "experiment JSON")->required()->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "train every (gate, seed) cell listed in the config");
  sweep->add_option("--config", config, "experiment JSON")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  return guarded([&] {
    if (*train) return cmd_train(load_experiment_config(config), std::cout);
    if (*gradcheck) return cmd_gradcheck(load_experiment_config(config), std::cout);
    if (*sweep) return cmd_sweep(load_experiment_config(config), std::cout);
    if (*eval) {
      EvalRequest req{checkpoint, data, std::nullopt};
      if (!out.empty()) req.out = out;
      return cmd_eval(req, std::cout);
    }
    AnalyzeRequest req;
    req.checkpoint = checkpoint;
    req.data = data;
    req.which = parse_analysis(which);
    req.out_dir = out;
    req.per_head_mean = per_head_mean;
    if (!compare.empty()) req.compare = compare;
    return cmd_analyze(req, std::cout);
  });
}
