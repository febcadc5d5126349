#pragma once

#include <string>
#include <vector>

#include "afuse/config.hpp"
#include "afuse/evaluate.hpp"

namespace afuse {

inline constexpr int kReportSchemaVersion = 1;

/// One trained variant of the robustness sweep under one seed.
struct SweepRow {
  std::string variant;  // "op:3-DC" or "rule:AA"
  std::string arch;
  std::uint64_t seed = 0;
  EvalMetrics clean;
  std::vector<EvalMetrics> attacked;  // one per budget
  std::string error;                  // non-empty when the variant failed
};

struct SweepReport {
  std::vector<AttackBudget> budgets;
  std::vector<SweepRow> rows;

  /// Median over seeds of the mIoU under budget b (-1 selects clean); NaN if no seed succeeded.
  double median_miou(const std::string& variant, int budget) const;
  std::vector<std::string> variants() const;
};

/// Operations are evaluated with the concatenation rule, rules with 3-RB in
/// every slot; each variant is trained with SAT and evaluated on `test`.
/// A failing variant is recorded and the sweep moves on.
/// Up to `threads` variants train at once; the report does not depend on it.
SweepReport run_robustness_sweep(const ExperimentConfig& cfg, const SampleBatch& train, const SampleBatch& test,
                                 int threads = 1);

Json to_json(const SweepReport& r);
/// Long format: one line per variant x budget x seed.
std::string sweep_csv(const SweepReport& r);

}  // namespace afuse
