#pragma once

#include <string>
#include <string_view>
#include <utility>

#include "afuse/parameters.hpp"
#include "afuse/tape.hpp"

namespace afuse {

enum class RuleKind {
  kMax,              // elementwise max
  kWeightedAverage,  // gamma1 * E_ir + gamma2 * E_vis
  kAdaptiveAverage,  // M_ir * E_ir + M_vis * E_vis, masks from a spatial-attention sub-block
  kSum,
  kConcat,           // channel concatenation
  kDirect,           // conv over the channel-stacked raw images
};

struct FusionRule {
  RuleKind kind = RuleKind::kAdaptiveAverage;
  double gamma1 = 0.5;
  double gamma2 = 0.5;

  /// "MAX", "WA", "WA(0.3,0.7)", "AA", "SUM", "CC", "DIRECT".
  std::string name() const;
  static FusionRule parse(std::string_view text);

  /// Channel count of the fused feature given per-modality channel count c.
  int fused_channels(int c) const { return kind == RuleKind::kConcat ? 2 * c : c; }

  friend bool operator==(const FusionRule&, const FusionRule&) = default;
};

/// Parameters owned by the rule (AA mask sub-block, DIRECT conv) under `prefix`.
void declare_rule(ParamSpecMap& spec, const FusionRule& rule, int channels, const std::string& prefix);

/// AA masks: per-pixel (M_ir, M_vis), each (B,1,H,W) in [0,1] with M_ir + M_vis = 1.
template <typename S>
std::pair<Var<S>, Var<S>> adaptive_masks(Tape<S>& tape, const std::string& prefix, Var<S> e_ir, Var<S> e_vis);

/// Fuses two feature maps. For kDirect the inputs are the raw images.
template <typename S>
Var<S> apply_rule(Tape<S>& tape, const FusionRule& rule, const std::string& prefix, Var<S> e_ir, Var<S> e_vis);

}  // namespace afuse
