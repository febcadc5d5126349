#include "afuse/losses.hpp"

#include <array>

#include "afuse/errors.hpp"

namespace afuse {

namespace {

template <typename S>
Tensor<S> box_filter(const Tensor<S>& image, int size) {
  const Tensor<S> kernel({1, 1, size, size}, S(1) / static_cast<S>(size * size));
  const std::array<const Tensor<S>*, 2> in{&image, &kernel};
  return evaluate_primitive<S>(Primitive::kConv2d, in, Attributes{});
}

template <typename S>
void require_single_channel(const Shape& s, const char* what) {
  if (s.size() != 4 || s[1] != 1) {
    throw ValidationError(std::string(what) + " expects (B,1,H,W) images, got " + to_string(s));
  }
}

template <typename S>
Tensor<S> contrast_map(const Tensor<S>& image) {
  const int B = image.dim(0);
  const std::size_t per = image.size() / static_cast<std::size_t>(B);
  Tensor<S> dev(image.shape());
  for (int n = 0; n < B; ++n) {
    const auto seg = image.array().segment(static_cast<Eigen::Index>(n * per), static_cast<Eigen::Index>(per));
    dev.array().segment(static_cast<Eigen::Index>(n * per), static_cast<Eigen::Index>(per)) =
        (seg - seg.mean()).abs();
  }
  return box_filter(dev, kSaliencyBlur);
}

}  // namespace

template <typename S>
SaliencyPair<S> saliency_from_contrast(const Tensor<S>& s_x, const Tensor<S>& s_y) {
  if (s_x.shape() != s_y.shape()) throw ValidationError("saliency maps differ in shape");
  const S tau = static_cast<S>(kSaliencyTau);
  SaliencyPair<S> sal;
  sal.m_x = Tensor<S>(s_x.shape(), ((s_x.array() + tau) / (s_x.array() + s_y.array() + S(2) * tau)).eval());
  sal.m_y = Tensor<S>(s_x.shape(), (S(1) - sal.m_x.array()).eval());
  return sal;
}

template <typename S>
SaliencyPair<S> saliency_pair(const Tensor<S>& x, const Tensor<S>& y) {
  require_single_channel<S>(x.shape(), "saliency_pair");
  if (x.shape() != y.shape()) {
    throw ValidationError("saliency_pair: shapes " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  }
  return saliency_from_contrast(contrast_map(x), contrast_map(y));
}

template <typename S>
Var<S> ssim(Var<S> a, Var<S> b) {
  require_single_channel<S>(a.shape(), "ssim");
  if (a.shape() != b.shape()) {
    throw ValidationError("ssim: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  const int H = a.shape()[2];
  const int W = a.shape()[3];
  if (H < kSsimWindow || W < kSsimWindow) {
    throw ValidationError("ssim: " + std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) +
                          " window larger than image " + to_string(a.shape()));
  }
  Tape<S>& tape = *a.tape;
  auto window = tape.constant(Tensor<S>({1, 1, kSsimWindow, kSsimWindow}, S(1) / S(kSsimWindow * kSsimWindow)));
  const int r = kSsimWindow / 2;
  auto local_mean = [&](Var<S> v) {
    auto m = ops::conv2d(v, window);
    return ops::slice(ops::slice(m, 2, r, H - 2 * r), 3, r, W - 2 * r);
  };
  auto mu_a = local_mean(a);
  auto mu_b = local_mean(b);
  auto mu_aa = ops::square(mu_a);
  auto mu_bb = ops::square(mu_b);
  auto mu_ab = mu_a * mu_b;
  auto var_a = local_mean(ops::square(a)) - mu_aa;
  auto var_b = local_mean(ops::square(b)) - mu_bb;
  auto cov = local_mean(a * b) - mu_ab;
  auto num = ops::affine(mu_ab, 2.0, kSsimC1) * ops::affine(cov, 2.0, kSsimC2);
  auto den = ops::affine(mu_aa + mu_bb, 1.0, kSsimC1) * ops::affine(var_a + var_b, 1.0, kSsimC2);
  return ops::mean(num / den);
}

template <typename S>
Var<S> fusion_loss(Var<S> u, Var<S> x, Var<S> y, const SaliencyPair<S>& sal, const LossWeights& w) {
  Tape<S>& tape = *u.tape;
  auto m_x = tape.constant(sal.m_x);
  auto m_y = tape.constant(sal.m_y);
  auto tx = x * m_x;
  auto ty = y * m_y;
  Var<S> mse;
  if (w.form == FusionLossForm::kWeightedTargets) {
    mse = ops::mean(ops::square(u - tx)) + ops::mean(ops::square(u - ty));
  } else {
    mse = ops::mean(ops::square(u * m_x - tx)) + ops::mean(ops::square(u * m_y - ty));
  }
  auto s = ssim(u, tx + ty);
  auto structural = w.literal_ssim ? s : ops::affine(s, -1.0, 1.0);
  return ops::affine(mse, w.w_mse, 0.0) + ops::affine(structural, w.w_ssim, 0.0);
}

template SaliencyPair<float> saliency_pair(const Tensor<float>&, const Tensor<float>&);
template SaliencyPair<double> saliency_pair(const Tensor<double>&, const Tensor<double>&);
template SaliencyPair<float> saliency_from_contrast(const Tensor<float>&, const Tensor<float>&);
template SaliencyPair<double> saliency_from_contrast(const Tensor<double>&, const Tensor<double>&);
template Var<float> ssim(Var<float>, Var<float>);
template Var<double> ssim(Var<double>, Var<double>);
template Var<float> fusion_loss(Var<float>, Var<float>, Var<float>, const SaliencyPair<float>&, const LossWeights&);
template Var<double> fusion_loss(Var<double>, Var<double>, Var<double>, const SaliencyPair<double>&,
                                 const LossWeights&);

}  // namespace afuse
