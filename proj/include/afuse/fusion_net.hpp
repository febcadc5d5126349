#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "afuse/arch.hpp"
#include "afuse/blocks.hpp"
#include "afuse/fusion_rules.hpp"
#include "afuse/parameters.hpp"
#include "afuse/relaxation.hpp"
#include "afuse/tape.hpp"

namespace afuse {

/// Per-pixel channel max minus channel min: (B,C,H,W) -> (B,1,H,W), nonnegative.
template <typename S>
Var<S> residual_feature(Var<S> features) {
  return ops::channel_max(features) - ops::channel_min(features);
}

template <typename S>
struct Decomposition {
  Var<S> low;
  Var<S> high;
  Var<S> gate;  // (B,1,H,W) share routed to the high branch
};

/// Offset added to the per-image mean before normalizing the residual feature.
inline constexpr double kResidualNormEps = 1e-3;

/// gate = sigmoid(a * (F_res / (mean(F_res) + eps) - b)); high = gate * E, low = (1 - gate) * E.
/// `a` and `b` are single-element tensors.
template <typename S>
Decomposition<S> decompose(Var<S> features, Var<S> residual, Var<S> a, Var<S> b) {
  auto norm = residual / ops::affine(ops::spatial_mean(residual), 1.0, kResidualNormEps);
  auto gate = ops::sigmoid(a * (norm - b));
  return {features * ops::affine(gate, -1.0, 1.0), features * gate, gate};
}

template <typename S>
struct FusionOutput {
  Var<S> u;                 // fused image (B,1,H,W) in [0,1]
  Var<S> fused;             // features after the cross-modal rule
  Var<S> e_ir, e_vis;       // stem features (unset for the DIRECT rule)
  Var<S> res_ir, res_vis;   // residual features
  Decomposition<S> dec_ir, dec_vis;
};

/// The fusion network N(x, y; theta) -> u. Either discrete (one block per
/// slot) or relaxed (every candidate per slot, mixed by softmax(alpha)).
///
/// Pipeline per modality: stem conv -> residual feature -> decomposition ->
/// low/high slot blocks -> SUM merge; then the cross-modal rule, the two
/// post-fusion slots and a sigmoid head conv to one channel.
class FusionNetwork {
 public:
  explicit FusionNetwork(const ArchSpec& spec, std::string prefix = "fusion");
  /// Supernet over `candidates` with logits stored under kAlphaName.
  FusionNetwork(std::vector<OpCode> candidates, FusionRule rule, int base_channels, std::string prefix = "fusion");

  bool relaxed() const { return relaxed_; }
  const FusionRule& rule() const { return rule_; }
  int base_channels() const { return channels_; }
  const std::string& prefix() const { return prefix_; }
  const std::vector<OpCode>& candidates() const { return candidates_; }
  /// Only meaningful for discrete networks.
  const ArchSpec& arch() const { return arch_; }
  const std::vector<Block>& slot_blocks(int slot) const { return slots_.at(static_cast<std::size_t>(slot)); }

  ParamSpecMap parameter_specs() const;
  std::string describe() const;

  template <typename S>
  FusionOutput<S> forward(Tape<S>& tape, Var<S> x, Var<S> y) const;

 private:
  void build_slots();
  int slot_in_channels(int slot) const;
  template <typename S>
  Var<S> run_slot(Tape<S>& tape, int slot, Var<S> x) const;

  bool relaxed_ = false;
  ArchSpec arch_;
  std::vector<OpCode> candidates_;
  FusionRule rule_;
  int channels_ = 16;
  std::string prefix_;
  std::array<std::vector<Block>, kNumSlots> slots_;
};

/// Parameters of the discrete network `chosen` taken out of a supernet store:
/// slot blocks come from the matching candidate, shared parts are copied.
template <typename S>
ParameterStore<S> extract_discrete_parameters(const ParameterStore<S>& supernet, const FusionNetwork& relaxed,
                                              const ArchSpec& chosen);

}  // namespace afuse
