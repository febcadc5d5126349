#include "afuse/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

namespace {

struct Variant {
  std::string name;
  ArchSpec arch;
};

std::vector<Variant> variants_of(const ExperimentConfig& cfg) {
  const int C = cfg.arch.base_channels;
  std::vector<Variant> out;
  for (const auto& op : cfg.sweep.ops) {
    out.push_back({"op:" + op.name(), ArchSpec::uniform(op, FusionRule::parse("CC"), C)});
  }
  for (const auto& rule : cfg.sweep.rules) {
    out.push_back({"rule:" + rule.name(), ArchSpec::uniform(OpCode::parse("3-RB"), rule, C)});
  }
  return out;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

double SweepReport::median_miou(const std::string& variant, int budget) const {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.variant != variant || !r.error.empty()) continue;
    v.push_back(budget < 0 ? r.clean.miou : r.attacked.at(static_cast<std::size_t>(budget)).miou);
  }
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::string> SweepReport::variants() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.variant) == out.end()) out.push_back(r.variant);
  }
  return out;
}

SweepReport run_robustness_sweep(const ExperimentConfig& cfg, const SampleBatch& train, const SampleBatch& test,
                                 int threads) {
  struct Task {
    std::string variant;
    ArchSpec arch;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const auto& v : variants_of(cfg)) {
    for (std::uint64_t seed : cfg.sweep.seeds) tasks.push_back({v.name, v.arch, seed});
  }

  SweepReport report;
  report.budgets = cfg.sweep.budgets;
  report.rows.resize(tasks.size());
  auto run = [&](std::size_t i) {
    const Task& t = tasks[i];
    SweepRow& row = report.rows[i];
    row.variant = t.variant;
    row.arch = t.arch.to_string();
    row.seed = t.seed;
    try {
      const Model model{FusionNetwork(t.arch), SegHead(cfg.classes, t.arch.base_channels)};
      JointConfig jc = cfg.aat.joint;
      jc.steps = cfg.sweep.steps;
      jc.seed = derive_seed(cfg.seed, t.seed);
      const auto trained = standard_adversarial_train(model, train, jc, derive_seed(cfg.seed ^ 0x5eedULL, t.seed));
      row.clean = evaluate(model, trained.params, test, std::nullopt, cfg.eval_batch);
      for (const auto& b : cfg.sweep.budgets) row.attacked.push_back(evaluate(model, trained.params, test, b, cfg.eval_batch));
    } catch (const std::exception& e) {
      row.error = e.what();
      row.attacked.assign(cfg.sweep.budgets.size(), EvalMetrics{});
    }
  };

  // Every task owns its seeds and its output slot, so the thread count does
  // not change the report.
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) run(i);
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return report;
}

Json to_json(const SweepReport& r) {
  Json budgets = Json::array();
  for (const auto& b : r.budgets) budgets.push_back(to_json(b));
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json attacked = Json::array();
    for (const auto& m : row.attacked) attacked.push_back(to_json(m));
    rows.push_back({{"variant", row.variant},
                    {"arch", row.arch},
                    {"seed", row.seed},
                    {"clean", to_json(row.clean)},
                    {"attacked", attacked},
                    {"error", row.error}});
  }
  Json medians = Json::object();
  for (const auto& v : r.variants()) {
    Json m = {{"clean", r.median_miou(v, -1)}};
    Json at = Json::array();
    for (std::size_t b = 0; b < r.budgets.size(); ++b) at.push_back(r.median_miou(v, static_cast<int>(b)));
    m["attacked"] = at;
    medians[v] = m;
  }
  return {{"kind", "sweep_report"}, {"schema_version", kReportSchemaVersion}, {"budgets", budgets}, {"rows", rows},
          {"medians", medians}};
}

std::string sweep_csv(const SweepReport& r) {
  std::ostringstream os;
  os << "schema_version,variant,epsilon,steps,iou_0,iou_1,iou_2,iou_3,miou,seed,error\n";
  auto line = [&](const SweepRow& row, double eps, int steps, const EvalMetrics& m) {
    os << kReportSchemaVersion << "," << row.variant << "," << fmt(eps) << "," << steps;
    for (int c = 0; c < 4; ++c) {
      os << "," << (static_cast<std::size_t>(c) < m.per_class_iou.size() ? fmt(m.per_class_iou[static_cast<std::size_t>(c)]) : "");
    }
    os << "," << (row.error.empty() ? fmt(m.miou) : "") << "," << row.seed << "," << (row.error.empty() ? "" : "failed")
       << "\n";
  };
  for (const auto& row : r.rows) {
    line(row, 0.0, 0, row.clean);
    for (std::size_t b = 0; b < r.budgets.size(); ++b) line(row, r.budgets[b].epsilon, r.budgets[b].steps, row.attacked[b]);
  }
  return os.str();
}

}  // namespace afuse
