#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "afuse/arch.hpp"
#include "afuse/blocks.hpp"
#include "afuse/parameters.hpp"
#include "afuse/tape.hpp"

namespace afuse {

/// Name of the (slots x candidates) architecture logits in a ParameterStore.
inline const std::string kAlphaName = "arch/alpha";

/// Continuous relaxation of the slot choices: real logits per (slot, candidate).
struct Relaxation {
  std::vector<OpCode> candidates;
  Eigen::MatrixXd alpha;  // kNumSlots x candidates.size()

  /// 3-DC, 7-RB, 3-DB, CA.
  static std::vector<OpCode> default_candidates();
  static Relaxation uniform(std::vector<OpCode> candidates);
  /// Reads alpha back from a store holding kAlphaName.
  template <typename S>
  static Relaxation from_store(std::vector<OpCode> candidates, const ParameterStore<S>& store);

  /// Row-wise softmax of alpha.
  Eigen::MatrixXd weights() const;
};

/// sum_o softmax(alpha[slot])_o * candidate_o(input); alpha is the bound
/// (slots x candidates) logit matrix.
template <typename S>
Var<S> mixed_forward(Tape<S>& tape, Var<S> alpha, int slot, std::span<const Block> candidates, Var<S> input);

/// Per slot, the argmax-weight candidate; ties go to the lowest index.
ArchSpec discretize(const Relaxation& relax, const FusionRule& rule, int base_channels);

}  // namespace afuse
