// Command-line front end: data generation, gradient checks, robustness
// sweeps, offline attacks, architecture search, training, evaluation and
// report merging. Exit status: 0 success, 1 validation error, 2 numerical abort.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "afuse/errors.hpp"
#include "afuse/experiment.hpp"
#include "afuse/gradient_suite.hpp"

namespace {

using namespace afuse;

constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  int threads = 1;
};

ExperimentConfig load(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig::defaults() : load_config(g.config);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.scene.seed = *g.seed;
    cfg.search.seed = *g.seed;
    cfg.aat.joint.seed = *g.seed;
  }
  return cfg;
}

Json run(const Globals& g, ExperimentRequest req) {
  return run_experiment(req, {std::filesystem::path(g.out), g.threads});
}

void print_metrics_line(const char* label, const Json& m) {
  std::printf("%-9s mIoU %.4f  loss %.4f\n", label, m.at("miou").get<double>(), m.at("loss").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust infrared/visible fusion with adversarial search and training"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  app.add_option("--config", g.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Overrides the run, scene, search and training seeds");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for sweeps (1 = bit-reproducible)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  int n = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and print its hash");
  gen->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);

  int grad_seeds = 20;
  auto* grad = app.add_subcommand("grad-check", "Finite-difference checks of every primitive and composite");
  grad->add_option("--seeds", grad_seeds, "Seeds per check")->check(CLI::PositiveNumber)->capture_default_str();

  app.add_subcommand("analyze", "Operation and fusion-rule robustness sweep");
  app.add_subcommand("attack-gen", "Train the transfer source and write the offline attacked sets");
  app.add_subcommand("search", "Robust architecture search over the fusion slots");

  std::string strategy;
  auto* train = app.add_subcommand("train", "Train and evaluate one strategy");
  train->add_option("--strategy", strategy, "normal, sat or aat")
      ->required()
      ->check(CLI::IsMember({"normal", "sat", "aat"}));

  std::string eps_text, run_dir;
  std::optional<int> eval_steps;
  auto* eval = app.add_subcommand("eval", "Evaluate a trained run, clean and under PGD");
  eval->add_option("--eps", eps_text, "Linf budget, a number or a fraction such as 4/255");
  eval->add_option("--steps", eval_steps, "PGD steps")->check(CLI::NonNegativeNumber);
  eval->add_option("--run", run_dir, "Training run directory (default <out>/train)");

  std::vector<std::string> strategies;
  auto* trend = app.add_subcommand("trend", "Normal, SAT and AAT on identical data over the trend seeds");
  trend->add_option("--strategies", strategies, "Subset of normal, sat, aat")
      ->check(CLI::IsMember({"normal", "sat", "aat"}));

  std::vector<std::string> manifests;
  auto* report = app.add_subcommand("report", "Merge experiment manifests into one CSV");
  report->add_option("manifests", manifests, "Manifest files")->required()->check(CLI::ExistingFile);

  std::string replay_path;
  auto* rerun = app.add_subcommand("replay", "Re-run a manifest and compare its metrics bit for bit");
  rerun->add_option("manifest", replay_path, "Manifest file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (*grad) {
      bool ok = true;
      for (const auto& c : run_gradient_suite(grad_seeds)) {
        std::printf("%-32s %.3e  %s\n", c.name.c_str(), c.max_error, c.passed() ? "ok" : "FAIL");
        ok = ok && c.passed();
      }
      return ok ? 0 : kExitNumerical;
    }
    if (*report) {
      std::vector<Json> loaded;
      for (const auto& m : manifests) loaded.push_back(read_json(m));
      const std::string csv = merge_reports(loaded);
      std::filesystem::create_directories(g.out);
      std::ofstream(std::filesystem::path(g.out) / "report.csv") << csv;
      std::cout << csv;
      return 0;
    }
    if (*rerun) {
      const auto r = replay(read_json(replay_path), 1);
      std::printf("%s\n", r.identical ? "metrics identical" : "metrics differ");
      if (!r.identical) std::printf("recorded %s\nreplayed %s\n", r.recorded.dump().c_str(), r.replayed.dump().c_str());
      return r.identical ? 0 : kExitNumerical;
    }

    ExperimentRequest req;
    req.config = load(g);
    if (*gen) {
      req.kind = "gen-data";
      req.args = {{"n", n}};
      const Json m = run(g, req);
      std::printf("%s\n", m.at("metrics").at("hash").get<std::string>().c_str());
    } else if (app.got_subcommand("analyze")) {
      req.kind = "analyze";
      const Json m = run(g, req);
      for (const auto& [variant, med] : m.at("metrics").at("medians").items()) {
        std::printf("%-12s clean %s  attacked %s\n", variant.c_str(), med.at("clean").dump().c_str(),
                    med.at("attacked").dump().c_str());
      }
    } else if (app.got_subcommand("attack-gen")) {
      req.kind = "attack-gen";
      const Json m = run(g, req);
      std::cout << m.at("metrics").at("sets").dump(2) << "\n";
    } else if (app.got_subcommand("search")) {
      req.kind = "search";
      const Json m = run(g, req);
      std::printf("%s\n", m.at("metrics").at("arch").get<std::string>().c_str());
    } else if (*train) {
      req.kind = "train";
      req.args = {{"strategy", strategy}};
      const Json m = run(g, req);
      print_metrics_line("clean", m.at("metrics").at("clean"));
      print_metrics_line("attacked", m.at("metrics").at("attacked"));
    } else if (*eval) {
      req.kind = "eval";
      const std::filesystem::path dir = run_dir.empty() ? std::filesystem::path(g.out) / "train" : std::filesystem::path(run_dir);
      AttackBudget budget = req.config.eval_attack;
      if (!eps_text.empty()) budget = AttackBudget::with_epsilon(parse_epsilon(eps_text), budget.steps, budget.seed);
      if (eval_steps) budget.steps = *eval_steps;
      budget.validate();
      req.args = {{"run", std::filesystem::absolute(dir).string()},
                  {"run_hash", content_hash(TrainingRun::load(dir).params)},
                  {"budget", to_json(budget)}};
      const Json m = run(g, req);
      std::cout << m.at("metrics").dump(2) << "\n";
    } else if (*trend) {
      req.kind = "trend";
      if (!strategies.empty()) req.args = {{"strategies", strategies}};
      const Json m = run(g, req);
      std::cout << m.at("metrics").at("medians").dump(2) << "\n";
    }
    return 0;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
