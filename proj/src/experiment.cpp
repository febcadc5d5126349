#include "afuse/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>

#include "afuse/errors.hpp"
#include "afuse/search.hpp"
#include "afuse/sweep.hpp"

#ifndef AFUSE_VERSION
#define AFUSE_VERSION "unknown"
#endif

namespace afuse {

namespace {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string loss_form_name(FusionLossForm f) {
  return f == FusionLossForm::kWeightedTargets ? "weighted_targets" : "weighted_differences";
}

Json outcome_json(const StrategyOutcome& o) {
  return {{"strategy", to_string(o.strategy)},
          {"clean", to_json(o.clean)},
          {"attacked", to_json(o.attacked)},
          {"final_hash", content_hash(o.run.params)},
          {"provenance", o.run.provenance}};
}

std::vector<Strategy> strategies_from(const Json& args) {
  std::vector<Strategy> out;
  if (!args.contains("strategies")) return {Strategy::kNormal, Strategy::kSat, Strategy::kAat};
  for (const auto& s : args.at("strategies")) out.push_back(strategy_from_string(s.get<std::string>()));
  if (out.empty()) throw ValidationError("trend needs at least one strategy");
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw ValidationError("cannot write " + path.string());
}

struct KindResult {
  Json metrics;
  Json hashes = Json::object();
};

KindResult run_gen_data(const ExperimentRequest& req, const ExperimentOptions& opt) {
  const int n = req.args.value("n", req.config.data.train);
  if (n < 1) throw ValidationError("gen-data needs n >= 1");
  const auto data = generate_dataset(req.config.scene, n);
  KindResult r;
  const std::string hash = content_hash(data.samples);
  std::vector<long long> counts(static_cast<std::size_t>(kSceneClasses), 0);
  for (int l : data.samples.labels) ++counts.at(static_cast<std::size_t>(l));
  r.metrics = {{"n", n}, {"hash", hash}, {"class_pixels", counts}};
  r.hashes = {{"dataset", hash}};
  if (opt.out) {
    save_checkpoint(*opt.out / "dataset.ckpt", to_checkpoint(data.samples, {{"scene", req.config.scene.to_json()}}));
  }
  return r;
}

KindResult run_attack_gen(const ExperimentRequest& req, const ExperimentData& data, const ExperimentOptions& opt) {
  const ExperimentConfig& cfg = req.config;
  const auto offline = prepare_offline_attacks(cfg.model(), data.train.samples, cfg.aat, cfg.seed);
  KindResult r;
  r.metrics = {{"source_hash", content_hash(offline.source_params)}, {"pool", offline.pool}, {"sets", describe(offline.sets)}};
  if (opt.out) {
    save_checkpoint(*opt.out / "source.ckpt", to_checkpoint(offline.source_params, {{"role", "transfer source"}}));
    for (const auto& level : offline.sets) {
      save_attacked_dataset(*opt.out / "attacks", level.train);
      save_attacked_dataset(*opt.out / "attacks", level.val);
    }
  }
  return r;
}

KindResult run_search_kind(const ExperimentRequest& req, const ExperimentData& data, const ExperimentOptions& opt) {
  const SearchConfig& sc = req.config.search;
  const auto result = hds_search(sc, data.train.samples, data.val.samples);
  KindResult r;
  r.metrics = search_report(sc, result);
  r.metrics["supernet_hash"] = content_hash(result.params);
  if (opt.out) {
    save_checkpoint(*opt.out / "supernet.ckpt", to_checkpoint(result.params, {{"arch", result.arch.to_string()}}));
    write_json(*opt.out / "search_report.json", r.metrics);
  }
  return r;
}

KindResult run_train_kind(const ExperimentRequest& req, const ExperimentData& data, const ExperimentOptions& opt) {
  const Strategy s = strategy_from_string(req.args.at("strategy").get<std::string>());
  const auto outcome = train_and_evaluate(req.config, s, data);
  KindResult r;
  r.metrics = outcome_json(outcome);
  if (opt.out) outcome.run.save(*opt.out / "train", to_json(req.config));
  return r;
}

KindResult run_eval_kind(const ExperimentRequest& req, const ExperimentOptions& opt) {
  const std::filesystem::path dir = req.args.at("run").get<std::string>();
  const Json run_manifest = read_json(dir / "manifest.json");
  const ExperimentConfig cfg = experiment_config_from_json(run_manifest.at("config"), ExperimentConfig::defaults());
  const TrainingRun run = TrainingRun::load(dir);
  const std::string hash = content_hash(run.params);
  if (req.args.contains("run_hash") && req.args.at("run_hash").get<std::string>() != hash) {
    throw ValidationError("checkpoint in " + dir.string() + " changed since the manifest was written");
  }
  const Model model = cfg.model();
  check_parameters(model.parameter_specs(), run.params, "eval");
  const AttackBudget budget =
      req.args.contains("budget") ? budget_from_json(req.args.at("budget")) : req.config.eval_attack;
  budget.validate();
  const auto data = make_data(cfg);
  KindResult r;
  r.metrics = {{"strategy", to_string(run.strategy)},
               {"checkpoint_hash", hash},
               {"clean", to_json(evaluate(model, run.params, data.test.samples, std::nullopt, req.config.eval_batch))},
               {"attacked", to_json(evaluate(model, run.params, data.test.samples, budget, req.config.eval_batch))}};
  r.hashes = dataset_hashes(data);
  if (opt.out) write_json(*opt.out / "eval_metrics.json", r.metrics);
  return r;
}

KindResult run_analyze(const ExperimentRequest& req, const ExperimentData& data, const ExperimentOptions& opt) {
  const auto report = run_robustness_sweep(req.config, data.train.samples, data.test.samples, opt.threads);
  KindResult r;
  r.metrics = to_json(report);
  if (opt.out) write_text(*opt.out / "sweep.csv", sweep_csv(report));
  return r;
}

KindResult run_trend_kind(const ExperimentRequest& req, const ExperimentOptions&) {
  const auto report = run_trend(req.config, strategies_from(req.args));
  KindResult r;
  r.metrics = to_json(report);
  for (std::uint64_t s : req.config.trend_seeds) {
    r.hashes[std::to_string(s)] = dataset_hashes(make_data(trend_config(req.config, s)));
  }
  return r;
}

}  // namespace

std::string code_version() { return AFUSE_VERSION; }

Json dataset_hashes(const ExperimentData& data) {
  return {{"train", content_hash(data.train.samples)},
          {"val", content_hash(data.val.samples)},
          {"test", content_hash(data.test.samples)}};
}

Json run_experiment(const ExperimentRequest& req, const ExperimentOptions& opt) {
  req.config.validate();
  if (opt.threads < 1) throw ValidationError("threads must be >= 1");
  if (opt.out) std::filesystem::create_directories(*opt.out);
  const auto t0 = std::chrono::steady_clock::now();

  KindResult r;
  if (req.kind == "gen-data") {
    r = run_gen_data(req, opt);
  } else if (req.kind == "eval") {
    r = run_eval_kind(req, opt);
  } else if (req.kind == "trend") {
    r = run_trend_kind(req, opt);
  } else {
    const auto data = make_data(req.config);
    if (req.kind == "attack-gen") {
      r = run_attack_gen(req, data, opt);
    } else if (req.kind == "search") {
      r = run_search_kind(req, data, opt);
    } else if (req.kind == "train") {
      r = run_train_kind(req, data, opt);
    } else if (req.kind == "analyze") {
      r = run_analyze(req, data, opt);
    } else {
      throw ValidationError("unknown experiment kind '" + req.kind + "'");
    }
    r.hashes = dataset_hashes(data);
  }

  const ExperimentConfig& cfg = req.config;
  Json manifest = {{"kind", "experiment_manifest"},
                   {"schema_version", kManifestSchemaVersion},
                   {"experiment", req.kind},
                   {"code_version", code_version()},
                   {"created", utc_timestamp()},
                   {"wall_seconds", seconds_since(t0)},
                   {"config", to_json(cfg)},
                   {"args", req.args},
                   {"seeds", {{"seed", cfg.seed}, {"scene", cfg.scene.seed}, {"trend", cfg.trend_seeds}}},
                   {"dataset_hashes", r.hashes},
                   {"design",
                    {{"fusion_loss_form", loss_form_name(cfg.aat.joint.loss.form)},
                     {"literal_ssim", cfg.aat.joint.loss.literal_ssim},
                     {"meta_gradient", "first_order"}}},
                   {"metrics", r.metrics}};
  if (opt.out) write_json(*opt.out / (req.kind + ".manifest.json"), manifest);
  return manifest;
}

ExperimentRequest request_from_manifest(const Json& m) {
  if (!m.is_object() || m.value("kind", "") != "experiment_manifest") {
    throw ValidationError("not an experiment manifest");
  }
  if (m.at("schema_version") != kManifestSchemaVersion) {
    throw ValidationError("manifest schema version " + m.at("schema_version").dump() + " is not " +
                          std::to_string(kManifestSchemaVersion));
  }
  ExperimentRequest req;
  req.kind = m.at("experiment").get<std::string>();
  req.config = experiment_config_from_json(m.at("config"), ExperimentConfig::defaults());
  req.args = m.at("args");
  return req;
}

ReplayResult replay(const Json& manifest, int threads) {
  ReplayResult out;
  out.recorded = manifest.at("metrics");
  out.replayed = run_experiment(request_from_manifest(manifest), {std::nullopt, threads}).at("metrics");
  out.identical = out.recorded.dump() == out.replayed.dump();
  return out;
}

StrategyOutcome train_and_evaluate(const ExperimentConfig& cfg, Strategy strategy, const ExperimentData& data) {
  const Model model = cfg.model();
  StrategyOutcome o;
  o.strategy = strategy;
  const auto t0 = std::chrono::steady_clock::now();
  o.run = train_strategy(strategy, model, data.train.samples, cfg.aat, cfg.seed);
  o.train_seconds = seconds_since(t0);
  o.clean = evaluate(model, o.run.params, data.test.samples, std::nullopt, cfg.eval_batch);
  o.attacked = evaluate(model, o.run.params, data.test.samples, cfg.eval_attack, cfg.eval_batch);
  return o;
}

double TrendReport::median_miou(Strategy s, bool attacked) const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.strategy == s) v.push_back(attacked ? r.attacked.miou : r.clean.miou);
  }
  return median(std::move(v));
}

ExperimentConfig trend_config(const ExperimentConfig& cfg, std::uint64_t s) {
  ExperimentConfig c = cfg;
  c.seed = cfg.seed + s;
  c.scene.seed = cfg.scene.seed + s;
  c.aat.joint.seed = cfg.aat.joint.seed + s;
  return c;
}

TrendReport run_trend(const ExperimentConfig& cfg, const std::vector<Strategy>& strategies) {
  TrendReport report;
  for (std::uint64_t s : cfg.trend_seeds) {
    const ExperimentConfig c = trend_config(cfg, s);
    const auto data = make_data(c);
    for (Strategy st : strategies) {
      const auto o = train_and_evaluate(c, st, data);
      report.rows.push_back({s, st, o.clean, o.attacked, o.train_seconds, o.run.provenance});
    }
  }
  return report;
}

Json to_json(const TrendReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"seed", row.seed},
                    {"strategy", to_string(row.strategy)},
                    {"clean", to_json(row.clean)},
                    {"attacked", to_json(row.attacked)}});
    if (row.provenance.contains("pretext_levels")) rows.back()["pretext_levels"] = row.provenance.at("pretext_levels");
  }
  Json medians = Json::object();
  for (Strategy s : {Strategy::kNormal, Strategy::kSat, Strategy::kAat}) {
    const double c = r.median_miou(s, false);
    if (std::isnan(c)) continue;
    medians[to_string(s)] = {{"clean", c}, {"attacked", r.median_miou(s, true)}};
  }
  return {{"kind", "trend_report"}, {"schema_version", kReportSchemaVersion}, {"rows", rows}, {"medians", medians}};
}

namespace {

std::string csv_number(const Json& v) {
  if (v.is_null()) return "";
  std::ostringstream os;
  os.precision(17);
  os << v.get<double>();
  return os.str();
}

void csv_line(std::ostringstream& os, const std::string& experiment, const std::string& variant, const Json& seed,
              const Json& metrics, int classes, const std::string& error) {
  const Json& budget = metrics.at("budget");
  os << kReportSchemaVersion << "," << experiment << "," << variant << ","
     << (budget.is_null() ? "0" : csv_number(budget.at("epsilon"))) << ","
     << (budget.is_null() ? 0 : budget.at("steps").get<int>());
  const Json& iou = metrics.at("per_class_iou");
  for (int c = 0; c < classes; ++c) {
    os << "," << (static_cast<std::size_t>(c) < iou.size() ? csv_number(iou[static_cast<std::size_t>(c)]) : "");
  }
  os << "," << (error.empty() ? csv_number(metrics.at("miou")) : "") << "," << seed.dump() << "," << error << "\n";
}

void check_report_schema(const Json& report) {
  if (report.value("schema_version", -1) != kReportSchemaVersion) {
    throw ValidationError("report schema version " + report.value("schema_version", Json(nullptr)).dump() +
                          " is not " + std::to_string(kReportSchemaVersion));
  }
}

}  // namespace

std::string merge_reports(const std::vector<Json>& manifests) {
  int classes = 0;
  for (const auto& m : manifests) {
    request_from_manifest(m);  // validates kind and schema version
    classes = std::max(classes, m.at("config").at("classes").get<int>());
  }
  std::ostringstream os;
  os << "schema_version,experiment,variant,epsilon,steps";
  for (int c = 0; c < classes; ++c) os << ",iou_" << c;
  os << ",miou,seed,error\n";
  for (const auto& m : manifests) {
    const std::string kind = m.at("experiment").get<std::string>();
    const Json& metrics = m.at("metrics");
    const Json seed = m.at("seeds").at("seed");
    if (kind == "train" || kind == "eval") {
      const std::string variant = "strategy:" + metrics.at("strategy").get<std::string>();
      csv_line(os, kind, variant, seed, metrics.at("clean"), classes, "");
      csv_line(os, kind, variant, seed, metrics.at("attacked"), classes, "");
    } else if (kind == "trend") {
      check_report_schema(metrics);
      for (const auto& row : metrics.at("rows")) {
        const std::string variant = "strategy:" + row.at("strategy").get<std::string>();
        csv_line(os, kind, variant, row.at("seed"), row.at("clean"), classes, "");
        csv_line(os, kind, variant, row.at("seed"), row.at("attacked"), classes, "");
      }
    } else if (kind == "analyze") {
      check_report_schema(metrics);
      for (const auto& row : metrics.at("rows")) {
        const std::string error = row.at("error").get<std::string>().empty() ? "" : "failed";
        const std::string variant = row.at("variant").get<std::string>();
        csv_line(os, kind, variant, row.at("seed"), row.at("clean"), classes, error);
        for (const auto& a : row.at("attacked")) csv_line(os, kind, variant, row.at("seed"), a, classes, error);
      }
    }
    // gen-data, attack-gen and search manifests carry no segmentation metrics.
  }
  return os.str();
}

}  // namespace afuse
