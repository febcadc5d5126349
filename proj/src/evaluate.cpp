#include "afuse/evaluate.hpp"

#include <algorithm>
#include <cmath>

#include "afuse/checkpoint.hpp"
#include "afuse/errors.hpp"

namespace afuse {

EvalMetrics evaluate(const Model& model, const ParameterStore<float>& params, const SampleBatch& data,
                     const std::optional<AttackBudget>& budget, int batch_size) {
  check_parameters(model.parameter_specs(), params, "evaluate");
  if (data.size() == 0) throw ValidationError("evaluate: empty dataset");
  if (batch_size < 1) throw ValidationError("evaluate: batch_size must be >= 1");
  ConfusionMatrix cm(model.seg.classes());
  double loss = 0.0;
  for (int start = 0; start < data.size(); start += batch_size) {
    const int count = std::min(batch_size, data.size() - start);
    SampleBatch part = data.slice(start, count);
    if (budget && budget->epsilon > 0.0 && budget->steps > 0) {
      AttackResult r = pgd_attack(model, params, part, *budget, start);
      part.x = std::move(r.x_adv);
      part.y = std::move(r.y_adv);
    }
    Tape<float> tape(params);
    tape.set_trainable([](const std::string&) { return false; });
    auto out = model.forward(tape, tape.constant(part.x), tape.constant(part.y));
    loss += count * static_cast<double>(cross_entropy(out.logits, part.labels).value().item());
    cm.add(predict_labels(out.logits.value()), part.labels);
  }
  const MiouResult r = miou(cm);
  EvalMetrics m;
  m.per_class_iou = r.per_class;
  m.miou = r.mean;
  m.loss = loss / data.size();
  m.budget = budget;
  return m;
}

Json to_json(const EvalMetrics& m) {
  Json iou = Json::array();
  for (double v : m.per_class_iou) iou.push_back(std::isnan(v) ? Json(nullptr) : Json(v));
  Json j = {{"per_class_iou", iou}, {"miou", m.miou}, {"loss", m.loss}};
  j["budget"] = m.budget ? to_json(*m.budget) : Json(nullptr);
  return j;
}

}  // namespace afuse
