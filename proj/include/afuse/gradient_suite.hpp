#pragma once

#include <string>
#include <vector>

namespace afuse {

inline constexpr double kGradientTolerance = 1e-4;

struct GradientCheck {
  std::string name;      // primitive name or "composite/<what>"
  double max_error = 0;  // worst relative error over all seeds
  int seeds = 0;

  bool passed() const { return max_error <= kGradientTolerance; }
};

/// Finite-difference checks in double precision of every primitive and of the
/// composite paths (fusion network, fusion loss, SSIM, segmentation head with
/// cross-entropy, alpha through mixed_forward). Inputs keep a margin from the
/// kinks of relu, max, clip and the channel extrema.
std::vector<GradientCheck> run_gradient_suite(int seeds = 20);

}  // namespace afuse
