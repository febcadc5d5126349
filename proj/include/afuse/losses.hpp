#pragma once

#include "afuse/tape.hpp"
#include "afuse/tensor.hpp"

namespace afuse {

inline constexpr double kSaliencyTau = 1e-3;
inline constexpr int kSaliencyBlur = 5;
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Pixelwise convex weights (M_x, M_y) assigning fusion targets to each modality.
template <typename S>
struct SaliencyPair {
  Tensor<S> m_x;
  Tensor<S> m_y;
};

/// s_k = box5(|I_k - mean(I_k)|), M_x = (s_x + tau) / (s_x + s_y + 2 tau), M_y = 1 - M_x.
/// Inputs are (B,1,H,W); means are per image.
template <typename S>
SaliencyPair<S> saliency_pair(const Tensor<S>& x, const Tensor<S>& y);

/// The same weights from precomputed contrast maps.
template <typename S>
SaliencyPair<S> saliency_from_contrast(const Tensor<S>& s_x, const Tensor<S>& s_y);

/// Mean local SSIM over all valid 7x7 uniform windows of (B,1,H,W) images.
template <typename S>
Var<S> ssim(Var<S> a, Var<S> b);

enum class FusionLossForm {
  kWeightedTargets,      // MSE(u, M_x x) + MSE(u, M_y y)
  kWeightedDifferences,  // MSE(M_x u, M_x x) + MSE(M_y u, M_y y)
};

struct LossWeights {
  double lambda = 1.0;  // weight of the attacked-training term
  double w_mse = 1.0;
  double w_ssim = 1.0;
  FusionLossForm form = FusionLossForm::kWeightedTargets;
  bool literal_ssim = false;  // add +SSIM instead of (1 - SSIM)
};

/// w_mse * (MSE terms) + w_ssim * (1 - SSIM(u, M_x x + M_y y)).
template <typename S>
Var<S> fusion_loss(Var<S> u, Var<S> x, Var<S> y, const SaliencyPair<S>& sal, const LossWeights& w);

}  // namespace afuse
