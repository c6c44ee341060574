#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "diffhybrid/diffhybrid.hpp"

namespace fs = std::filesystem;
using namespace diffhybrid;

namespace {

int run(CLI::App& app, int argc, char** argv) {
  std::string config, data, run_dir, out, ic;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;

  auto* gen = app.add_subcommand("generate", "synthesize truth and noisy observations");
  gen->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "override data.seed");

  auto* train = app.add_subcommand("train", "train the ensemble and write checkpoints");
  train->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  train->add_option("--data", data, "generate output directory")->required();
  train->add_option("--run", run_dir, "run directory")->required();
  train->add_option("--seed", seed, "override train.seed");

  auto* pred = app.add_subcommand("predict", "posterior-averaged rollout from checkpoints");
  pred->add_option("--run", run_dir, "run directory")->required();
  pred->add_option("--out", out, "output directory")->required();
  pred->add_option("--ic", ic, "initial condition file (default: the config's)");
  pred->add_option("--steps", steps, "rollout steps (default: predict.steps or grid.steps)");
  pred->add_option("--seed", seed, "override predict.seed");

  auto* eval = app.add_subcommand("evaluate", "score a prediction against the truth");
  eval->add_option("--run", run_dir, "prediction directory")->required();
  eval->add_option("--data", data, "generate output directory holding the truth")->required();
  eval->add_option("--out", out, "metrics JSON path")->required();

  auto* grad = app.add_subcommand("gradcheck", "compare reverse-mode and finite-difference gradients");
  grad->add_option("--config", config, "experiment config")->required()->check(CLI::ExistingFile);
  grad->add_option("--out", out, "report JSON path");
  grad->add_option("--seed", seed, "parameter initialization seed (default: train.seed)");
  grad->add_option("--steps", steps, "rollout steps (default: gradcheck.steps)");

  app.require_subcommand(1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (gen->parsed()) {
    io::ExperimentConfig cfg = io::load_config(config);
    if (seed) cfg.data.seed = *seed;
    cmd_generate(cfg, out);
    std::cout << "wrote " << out << "\n";
  } else if (train->parsed()) {
    io::ExperimentConfig cfg = io::load_config(config);
    if (seed) cfg.train.seed = *seed;
    const TrainSummary s = cmd_train(cfg, data, run_dir);
    std::cout << "trained " << s.ok << " members (" << s.failed << " failed) into " << run_dir << "\n";
  } else if (pred->parsed()) {
    PredictOptions opt;
    if (!ic.empty()) opt.ic = fs::path(ic);
    opt.steps = steps;
    opt.seed = seed;
    const Prediction p = cmd_predict(run_dir, opt, out);
    std::cout << "predicted " << p.mean.size() << " frames from " << p.draws - p.failed << " draws into "
              << out << "\n";
  } else if (eval->parsed()) {
    cmd_evaluate(run_dir, data, out);
    std::cout << "wrote " << out << "\n";
  } else if (grad->parsed()) {
    io::ExperimentConfig cfg = io::load_config(config);
    if (steps) cfg.gradcheck.steps = *steps;
    const GradcheckOutcome g = run_gradcheck(cfg, seed ? *seed : cfg.train.seed);
    const std::string text = io::dump_json(g.summary);
    if (!out.empty()) io::write_text(out, text);
    std::cout << text;
    return g.passed ? kExitOk : kExitNumerical;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid neural solvers with propagated aleatoric and epistemic uncertainty"};
  try {
    return run(app, argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
}
