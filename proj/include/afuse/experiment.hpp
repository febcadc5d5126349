#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "afuse/checkpoint.hpp"
#include "afuse/config.hpp"
#include "afuse/evaluate.hpp"
#include "afuse/training.hpp"

namespace afuse {

inline constexpr int kManifestSchemaVersion = 1;

/// Library version compiled into manifests.
std::string code_version();

/// One experiment as the CLI runs it. `args` holds the kind-specific inputs:
///   gen-data   {"n"}
///   attack-gen {}
///   search     {}
///   train      {"strategy"}
///   eval       {"run", "run_hash", "budget"}   run: a TrainingRun directory
///   analyze    {}
///   trend      {"strategies"}
struct ExperimentRequest {
  std::string kind;
  ExperimentConfig config;
  Json args = Json::object();
};

struct ExperimentOptions {
  std::optional<std::filesystem::path> out;  // artifacts are written here when set
  int threads = 1;
};

/// Runs the request and returns its manifest: config snapshot, seeds, dataset
/// hashes, code version, timestamp, inputs and the metrics. The "metrics"
/// member is deterministic; everything time-dependent lives outside it.
Json run_experiment(const ExperimentRequest& request, const ExperimentOptions& options = {});

/// Rebuilds the request from a manifest alone.
ExperimentRequest request_from_manifest(const Json& manifest);

struct ReplayResult {
  Json recorded;
  Json replayed;
  bool identical = false;  // serialized metrics compare equal byte for byte
};

/// Re-runs a manifest without writing artifacts.
ReplayResult replay(const Json& manifest, int threads = 1);

/// Strategy results on one dataset.
struct StrategyOutcome {
  Strategy strategy = Strategy::kNormal;
  TrainingRun run;
  EvalMetrics clean;
  EvalMetrics attacked;
  double train_seconds = 0.0;
};

StrategyOutcome train_and_evaluate(const ExperimentConfig& cfg, Strategy strategy, const ExperimentData& data);

/// Normal / SAT / AAT under identical data, one row per (seed, strategy).
struct TrendRow {
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::kNormal;
  EvalMetrics clean;
  EvalMetrics attacked;
  double train_seconds = 0.0;
  Json provenance = Json::object();  // of the training run
};

struct TrendReport {
  std::vector<TrendRow> rows;

  /// Median over seeds of clean or attacked mIoU; NaN when absent.
  double median_miou(Strategy s, bool attacked) const;
};

/// Config of trend seed s: run seed s, scene seed shifted by s.
ExperimentConfig trend_config(const ExperimentConfig& cfg, std::uint64_t s);

TrendReport run_trend(const ExperimentConfig& cfg, const std::vector<Strategy>& strategies);

Json to_json(const TrendReport& r);

Json dataset_hashes(const ExperimentData& data);

/// Merges experiment manifests into one long-format CSV: one line per
/// (manifest, variant or strategy, budget, seed). Manifests and embedded
/// reports must carry the current schema versions.
std::string merge_reports(const std::vector<Json>& manifests);

}  // namespace afuse
