#pragma once

#include <optional>
#include <vector>

#include "afuse/attacks.hpp"
#include "afuse/model.hpp"

namespace afuse {

struct EvalMetrics {
  std::vector<double> per_class_iou;  // NaN for classes absent from prediction and truth
  double miou = 0.0;
  double loss = 0.0;  // mean task loss over the evaluated samples
  std::optional<AttackBudget> budget;
};

/// Clean metrics, or metrics on PGD examples generated batch by batch
/// against the same parameters. An epsilon-0 budget gives the clean metrics.
EvalMetrics evaluate(const Model& model, const ParameterStore<float>& params, const SampleBatch& data,
                     const std::optional<AttackBudget>& budget = std::nullopt, int batch_size = 16);

Json to_json(const EvalMetrics& m);

}  // namespace afuse
