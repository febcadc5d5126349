#pragma once

#include "afuse/batch.hpp"
#include "afuse/fusion_net.hpp"
#include "afuse/losses.hpp"
#include "afuse/seg_task.hpp"

namespace afuse {

/// The cascade N o T: fusion parameters under "fusion/", task parameters
/// under "seg/", architecture logits (supernets only) under "arch/".
struct Model {
  FusionNetwork fusion;
  SegHead seg;

  ParamSpecMap parameter_specs() const;

  template <typename S>
  struct Outputs {
    FusionOutput<S> fused;
    Var<S> logits;
  };

  template <typename S>
  Outputs<S> forward(Tape<S>& tape, Var<S> x, Var<S> y) const {
    Outputs<S> out{fusion.forward(tape, x, y), {}};
    out.logits = seg.forward(tape, out.fused.u);
    return out;
  }
};

inline const std::string kFusionPrefix = "fusion/";
inline const std::string kSegPrefix = "seg/";
inline const std::string kArchPrefix = "arch/";

template <typename S>
struct LossTerms {
  Var<S> fusion;    // L_F
  Var<S> task;      // L_T
  Var<S> combined;  // 0.5 L_F + 0.5 L_T
};

/// Records 0.5 L_F + 0.5 L_T for one batch on `tape` (parameters bound by the tape).
template <typename S>
LossTerms<S> cascade_losses(Tape<S>& tape, const Model& model, const SampleBatch& batch, const LossWeights& w);

/// L_F of the fusion network alone on one batch.
template <typename S>
Var<S> fusion_objective(Tape<S>& tape, const FusionNetwork& fusion, const SampleBatch& batch, const LossWeights& w);

/// L_tr on `clean` plus lambda * L_tr^at on `attacked`; either batch may be empty.
template <typename S>
Var<S> training_objective(Tape<S>& tape, const Model& model, const SampleBatch& clean, const SampleBatch& attacked,
                          const LossWeights& w);

struct HybridLosses {
  double l_tr = 0.0;
  double l_val = 0.0;
  double l_tr_at = 0.0;
  double objective = 0.0;  // l_tr + lambda * l_tr_at
};

HybridLosses hybrid_losses(const Model& model, const ParameterStore<float>& params, const SampleBatch& batch,
                           const SampleBatch& attacked_batch, const SampleBatch& val_batch, const LossWeights& w);

/// Copies a float batch to tensors of scalar S.
template <typename S>
Tensor<S> as_scalar(const Tensor<float>& t) {
  if constexpr (std::is_same_v<S, float>) {
    return t;
  } else {
    return t.template cast<S>();
  }
}

}  // namespace afuse
