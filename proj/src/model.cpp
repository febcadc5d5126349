#include "afuse/model.hpp"

namespace afuse {

ParamSpecMap Model::parameter_specs() const {
  ParamSpecMap spec = fusion.parameter_specs();
  spec.merge(seg.parameter_specs());
  return spec;
}

template <typename S>
LossTerms<S> cascade_losses(Tape<S>& tape, const Model& model, const SampleBatch& batch, const LossWeights& w) {
  const Tensor<S> xs = as_scalar<S>(batch.x);
  const Tensor<S> ys = as_scalar<S>(batch.y);
  auto x = tape.constant(xs);
  auto y = tape.constant(ys);
  auto out = model.forward(tape, x, y);
  LossTerms<S> terms;
  terms.fusion = fusion_loss(out.fused.u, x, y, saliency_pair(xs, ys), w);
  terms.task = cross_entropy(out.logits, batch.labels);
  terms.combined = ops::affine(terms.fusion, 0.5, 0.0) + ops::affine(terms.task, 0.5, 0.0);
  return terms;
}

template <typename S>
Var<S> fusion_objective(Tape<S>& tape, const FusionNetwork& fusion, const SampleBatch& batch, const LossWeights& w) {
  const Tensor<S> xs = as_scalar<S>(batch.x);
  const Tensor<S> ys = as_scalar<S>(batch.y);
  auto x = tape.constant(xs);
  auto y = tape.constant(ys);
  return fusion_loss(fusion.forward(tape, x, y).u, x, y, saliency_pair(xs, ys), w);
}

template <typename S>
Var<S> training_objective(Tape<S>& tape, const Model& model, const SampleBatch& clean, const SampleBatch& attacked,
                          const LossWeights& w) {
  Var<S> total;
  if (clean.size() > 0) total = cascade_losses(tape, model, clean, w).combined;
  if (attacked.size() > 0 && w.lambda != 0.0) {
    auto at = ops::affine(cascade_losses(tape, model, attacked, w).combined, w.lambda, 0.0);
    total = total.id < 0 ? at : total + at;
  }
  if (total.id < 0) total = tape.scalar(S(0));
  return total;
}

HybridLosses hybrid_losses(const Model& model, const ParameterStore<float>& params, const SampleBatch& batch,
                           const SampleBatch& attacked_batch, const SampleBatch& val_batch, const LossWeights& w) {
  auto eval = [&](const SampleBatch& b) {
    if (b.size() == 0) return 0.0;
    Tape<float> tape(params);
    return static_cast<double>(cascade_losses(tape, model, b, w).combined.value().item());
  };
  HybridLosses h;
  h.l_tr = eval(batch);
  h.l_val = eval(val_batch);
  h.l_tr_at = eval(attacked_batch);
  h.objective = h.l_tr + w.lambda * h.l_tr_at;
  return h;
}

template LossTerms<float> cascade_losses(Tape<float>&, const Model&, const SampleBatch&, const LossWeights&);
template LossTerms<double> cascade_losses(Tape<double>&, const Model&, const SampleBatch&, const LossWeights&);
template Var<float> fusion_objective(Tape<float>&, const FusionNetwork&, const SampleBatch&, const LossWeights&);
template Var<double> fusion_objective(Tape<double>&, const FusionNetwork&, const SampleBatch&, const LossWeights&);
template Var<float> training_objective(Tape<float>&, const Model&, const SampleBatch&, const SampleBatch&,
                                       const LossWeights&);
template Var<double> training_objective(Tape<double>&, const Model&, const SampleBatch&, const SampleBatch&,
                                        const LossWeights&);

}  // namespace afuse
