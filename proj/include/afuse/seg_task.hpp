#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "afuse/parameters.hpp"
#include "afuse/tape.hpp"

namespace afuse {

/// Per-pixel class ids, flattened (B,H,W).
using LabelMap = std::vector<int>;

/// Tiny segmentation network T(u; omega): three 3x3 conv-relu blocks and a
/// 1x1 classifier producing (B,K,H,W) logits.
class SegHead {
 public:
  explicit SegHead(int classes = 4, int channels = 16, std::string prefix = "seg");

  int classes() const { return classes_; }
  int channels() const { return channels_; }
  const std::string& prefix() const { return prefix_; }

  ParamSpecMap parameter_specs() const;

  template <typename S>
  Var<S> forward(Tape<S>& tape, Var<S> u) const;

 private:
  int classes_;
  int channels_;
  std::string prefix_;
};

/// Mean over pixels of -log softmax(logits)[true class]. Rejects out-of-range ids.
template <typename S>
Var<S> cross_entropy(Var<S> logits, const LabelMap& labels) {
  return ops::softmax_cross_entropy(logits, std::make_shared<const LabelMap>(labels));
}

/// Per-pixel argmax over the class axis.
template <typename S>
LabelMap predict_labels(const Tensor<S>& logits);

/// Accumulates a K x K confusion matrix (rows: truth, columns: prediction).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  void add(std::span<const int> pred, std::span<const int> truth);
  int classes() const { return static_cast<int>(counts_.rows()); }
  const Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>& counts() const { return counts_; }

 private:
  Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic> counts_;
};

struct MiouResult {
  std::vector<double> per_class;  // NaN where the class is absent from both maps
  double mean = 0.0;              // over present classes only
};

/// IoU_c = TP / (TP + FP + FN); classes absent from prediction and truth are excluded.
MiouResult miou(const ConfusionMatrix& cm);
MiouResult miou(std::span<const int> pred, std::span<const int> truth, int classes);

}  // namespace afuse
