#pragma once

#include <string>
#include <string_view>

#include "afuse/parameters.hpp"
#include "afuse/tape.hpp"

namespace afuse {

enum class OpFamily {
  kConv,              // C
  kDilatedConv,       // DC, dilation 2
  kResidual,          // RB, conv-relu-conv plus identity skip
  kDense,             // DB, 3 densely connected layers and a 1x1 transition
  kSpatialAttention,  // SA
  kChannelAttention,  // CA
  kIdentity,          // pass-through; only used to build rigged search spaces
  kZero,              // emits zeros; only used to build rigged search spaces
};

/// A fusion operation: family plus kernel size (k in {3,5,7}; ignored by SA, CA
/// and the auxiliary families). Textual form "3-DC", "7-RB", "CA", ...
struct OpCode {
  OpFamily family = OpFamily::kConv;
  int kernel = 3;

  std::string name() const;
  static OpCode parse(std::string_view text);

  friend bool operator==(const OpCode& a, const OpCode& b) {
    return a.family == b.family && (!a.uses_kernel() || a.kernel == b.kernel);
  }

  bool uses_kernel() const;
};

/// Growth rate of the dense block's internal layers.
int dense_growth(int out_ch);

/// A parameterized, spatial-size-preserving function Tensor -> Tensor.
/// Parameters live in a ParameterStore under `prefix`.
class Block {
 public:
  Block(OpCode code, int in_ch, int out_ch, std::string prefix);

  const OpCode& code() const { return code_; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  const std::string& prefix() const { return prefix_; }

  void declare(ParamSpecMap& spec) const;
  std::size_t parameter_count() const;

  template <typename S>
  Var<S> forward(Tape<S>& tape, Var<S> x) const;

 private:
  OpCode code_;
  int in_ch_;
  int out_ch_;
  std::string prefix_;
};

/// Validates the code and channel counts and returns the block.
Block build_block(OpCode code, int in_ch, int out_ch, const std::string& prefix);

/// Declares `<prefix>/w` (out, in, k, k) and `<prefix>/b` (out).
void declare_conv(ParamSpecMap& spec, const std::string& prefix, int in_ch, int out_ch, int kernel);

template <typename S>
Var<S> conv(Tape<S>& tape, const std::string& prefix, Var<S> x, int dilation = 1) {
  return ops::conv2d(x, tape.param(prefix + "/w"), tape.param(prefix + "/b"), dilation);
}

}  // namespace afuse
