#pragma once

#include <span>
#include <vector>

#include "afuse/seg_task.hpp"
#include "afuse/tensor.hpp"

namespace afuse {

/// Paired infrared image x, visible image y (both (B,1,H,W) in [0,1]) and
/// per-pixel labels z*.
struct SampleBatch {
  Tensor<float> x;
  Tensor<float> y;
  LabelMap labels;

  int size() const { return x.empty() ? 0 : x.dim(0); }
  int height() const { return x.dim(2); }
  int width() const { return x.dim(3); }

  /// Samples [start, start + count).
  SampleBatch slice(int start, int count) const;
  /// Samples at the given positions, in that order.
  SampleBatch gather(std::span<const int> indices) const;
  /// Concatenation along the batch axis; either side may be empty.
  static SampleBatch join(const SampleBatch& a, const SampleBatch& b);
};

}  // namespace afuse
