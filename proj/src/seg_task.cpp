#include "afuse/seg_task.hpp"

#include <cmath>
#include <limits>

#include "afuse/blocks.hpp"
#include "afuse/errors.hpp"

namespace afuse {

namespace {
constexpr int kSegDilations[3] = {1, 1, 2};
}

SegHead::SegHead(int classes, int channels, std::string prefix)
    : classes_(classes), channels_(channels), prefix_(std::move(prefix)) {
  if (classes_ < 2) throw ValidationError("segmentation head needs at least 2 classes");
  if (channels_ <= 0) throw ValidationError("segmentation head needs positive width");
}

ParamSpecMap SegHead::parameter_specs() const {
  ParamSpecMap spec;
  for (int i = 0; i < 3; ++i) {
    declare_conv(spec, prefix_ + "/conv" + std::to_string(i), i == 0 ? 1 : channels_, channels_, 3);
  }
  declare_conv(spec, prefix_ + "/classifier", channels_, classes_, 1);
  return spec;
}

template <typename S>
Var<S> SegHead::forward(Tape<S>& tape, Var<S> u) const {
  auto h = u;
  for (int i = 0; i < 3; ++i) {
    h = ops::relu(conv(tape, prefix_ + "/conv" + std::to_string(i), h, kSegDilations[i]));
  }
  return conv(tape, prefix_ + "/classifier", h);
}

template <typename S>
LabelMap predict_labels(const Tensor<S>& logits) {
  if (logits.rank() != 4) throw ValidationError("predict_labels expects (B,K,H,W) logits");
  const int B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  LabelMap out(static_cast<std::size_t>(B) * P);
  for (int n = 0; n < B; ++n) {
    for (int p = 0; p < P; ++p) {
      int best = 0;
      S best_v = logits[static_cast<std::size_t>(n) * K * P + p];
      for (int k = 1; k < K; ++k) {
        const S v = logits[(static_cast<std::size_t>(n) * K + k) * P + p];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(n) * P + p] = best;
    }
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int classes) {
  if (classes < 2) throw ValidationError("mIoU needs at least 2 classes");
  counts_.setZero(classes, classes);
}

void ConfusionMatrix::add(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw ValidationError("prediction and truth sizes differ: " + std::to_string(pred.size()) + " vs " +
                          std::to_string(truth.size()));
  }
  const int K = classes();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= K || truth[i] < 0 || truth[i] >= K) {
      throw ValidationError("label id outside [0, " + std::to_string(K) + ")");
    }
    ++counts_(truth[i], pred[i]);
  }
}

MiouResult miou(const ConfusionMatrix& cm) {
  const auto& c = cm.counts();
  MiouResult r;
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < cm.classes(); ++k) {
    const long long tp = c(k, k);
    const long long fn = c.row(k).sum() - tp;
    const long long fp = c.col(k).sum() - tp;
    const long long denom = tp + fp + fn;
    if (denom == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class.push_back(iou);
    sum += iou;
    ++present;
  }
  r.mean = present > 0 ? sum / present : 0.0;
  return r;
}

MiouResult miou(std::span<const int> pred, std::span<const int> truth, int classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred, truth);
  return miou(cm);
}

template Var<float> SegHead::forward(Tape<float>&, Var<float>) const;
template Var<double> SegHead::forward(Tape<double>&, Var<double>) const;
template LabelMap predict_labels(const Tensor<float>&);
template LabelMap predict_labels(const Tensor<double>&);

}  // namespace afuse
