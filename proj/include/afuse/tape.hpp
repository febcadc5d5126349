#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "afuse/parameters.hpp"
#include "afuse/tensor.hpp"

namespace afuse {

/// The closed set of differentiable primitives. Every network, loss and
/// attack in the library is expressed with these.
enum class Primitive {
  kLeaf,
  kConv2d,       // stride 1, zero same-padding, optional dilation; inputs (x, w[, b])
  kAdd,          // binary ops broadcast extents of 1 (and single-element tensors)
  kSub,
  kMul,
  kDiv,
  kMaximum,
  kRelu,
  kSigmoid,
  kLog,
  kAffine,       // scale * x + shift
  kSquare,
  kSqrt,
  kClip,         // clamp to [lo, hi]
  kSoftmax,      // along attrs.axis
  kConcat,       // along attrs.axis (channel by default)
  kSlice,        // [start, start + length) along attrs.axis
  kGlobalAvgPool,     // (B,C,H,W) -> (B,C,1,1)
  kChannelMax,        // (B,C,H,W) -> (B,1,H,W)
  kChannelMin,
  kChannelMean,
  kSpatialMean,       // (B,...) -> (B,1,1,1), mean over all non-batch extents
  kMean,              // -> (1)
  kSoftmaxCrossEntropy,  // logits (B,K,H,W), labels in attrs -> (1)
};

std::string_view to_string(Primitive kind);
/// Rejects unknown names with ValidationError.
Primitive primitive_from_string(std::string_view name);
/// All primitives except kLeaf, in declaration order.
std::span<const Primitive> all_primitives();

struct Attributes {
  int dilation = 1;
  int axis = 1;
  int start = 0;
  int length = 0;
  double scale = 1.0;
  double shift = 0.0;
  double lo = 0.0;
  double hi = 1.0;
  std::shared_ptr<const std::vector<int>> labels;
};

template <typename Scalar>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename Scalar>
using Gradients = TensorMap<Scalar>;

/// Eagerly evaluated computation record with reverse-mode differentiation.
/// A tape is single-owner; independent tapes may run on separate threads.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    Primitive kind = Primitive::kLeaf;
    std::vector<int> inputs;
    Attributes attrs;
    Tensor<Scalar> value;
    std::string name;  // non-empty for named leaves
    bool requires_grad = false;
  };

  Tape() = default;
  /// Parameters are bound lazily on first use through param().
  explicit Tape(const ParameterStore<Scalar>& params) : params_(&params) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> param(const std::string& name);
  /// Named differentiable leaf (e.g. an attacked image).
  Var<Scalar> input(const std::string& name, Tensor<Scalar> value);
  /// Non-differentiable leaf.
  Var<Scalar> constant(Tensor<Scalar> value);
  Var<Scalar> scalar(Scalar value) { return constant(Tensor<Scalar>({1}, value)); }

  Var<Scalar> apply(Primitive kind, std::span<const Var<Scalar>> inputs, const Attributes& attrs = {});
  Var<Scalar> apply(Primitive kind, std::initializer_list<Var<Scalar>> inputs, const Attributes& attrs = {}) {
    return apply(kind, std::span<const Var<Scalar>>(inputs.begin(), inputs.size()), attrs);
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  const ParameterStore<Scalar>* parameters() const { return params_; }

  /// Restricts which parameters receive gradients; must be set before they
  /// are bound. The rest behave as constants (their gradients come back zero).
  void set_trainable(std::function<bool(const std::string&)> filter) { trainable_ = std::move(filter); }

  /// d loss / d leaf for every bound parameter store entry and every named
  /// input. Leaves the loss does not reach get zero tensors.
  Gradients<Scalar> backward(Var<Scalar> loss) const;

 private:
  Var<Scalar> push(Node node);

  const ParameterStore<Scalar>* params_ = nullptr;
  std::vector<Node> nodes_;
  std::map<std::string, int> leaf_ids_;
  std::function<bool(const std::string&)> trainable_;
};

extern template class Tape<float>;
extern template class Tape<double>;

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape->node(id).value;
}

/// Forward evaluation of one primitive outside of any tape.
template <typename Scalar>
Tensor<Scalar> evaluate_primitive(Primitive kind, std::span<const Tensor<Scalar>* const> inputs,
                                  const Attributes& attrs);

/// Free-function spellings of the primitives.
namespace ops {

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int dilation = 1) {
  Attributes a;
  a.dilation = dilation;
  return x.tape->apply(Primitive::kConv2d, {x, w, b}, a);
}
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, int dilation = 1) {
  Attributes a;
  a.dilation = dilation;
  return x.tape->apply(Primitive::kConv2d, {x, w}, a);
}
template <typename S>
Var<S> add(Var<S> a, Var<S> b) { return a.tape->apply(Primitive::kAdd, {a, b}); }
template <typename S>
Var<S> sub(Var<S> a, Var<S> b) { return a.tape->apply(Primitive::kSub, {a, b}); }
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) { return a.tape->apply(Primitive::kMul, {a, b}); }
template <typename S>
Var<S> div(Var<S> a, Var<S> b) { return a.tape->apply(Primitive::kDiv, {a, b}); }
template <typename S>
Var<S> maximum(Var<S> a, Var<S> b) { return a.tape->apply(Primitive::kMaximum, {a, b}); }
template <typename S>
Var<S> relu(Var<S> x) { return x.tape->apply(Primitive::kRelu, {x}); }
template <typename S>
Var<S> sigmoid(Var<S> x) { return x.tape->apply(Primitive::kSigmoid, {x}); }
template <typename S>
Var<S> log(Var<S> x) { return x.tape->apply(Primitive::kLog, {x}); }
template <typename S>
Var<S> affine(Var<S> x, double scale, double shift) {
  Attributes a;
  a.scale = scale;
  a.shift = shift;
  return x.tape->apply(Primitive::kAffine, {x}, a);
}
template <typename S>
Var<S> square(Var<S> x) { return x.tape->apply(Primitive::kSquare, {x}); }
template <typename S>
Var<S> sqrt(Var<S> x) { return x.tape->apply(Primitive::kSqrt, {x}); }
template <typename S>
Var<S> clip(Var<S> x, double lo, double hi) {
  Attributes a;
  a.lo = lo;
  a.hi = hi;
  return x.tape->apply(Primitive::kClip, {x}, a);
}
template <typename S>
Var<S> softmax(Var<S> x, int axis) {
  Attributes a;
  a.axis = axis;
  return x.tape->apply(Primitive::kSoftmax, {x}, a);
}
template <typename S>
Var<S> concat(std::span<const Var<S>> xs, int axis = 1) {
  Attributes a;
  a.axis = axis;
  return xs.front().tape->apply(Primitive::kConcat, xs, a);
}
template <typename S>
Var<S> concat(std::initializer_list<Var<S>> xs, int axis = 1) {
  return concat(std::span<const Var<S>>(xs.begin(), xs.size()), axis);
}
template <typename S>
Var<S> slice(Var<S> x, int axis, int start, int length) {
  Attributes a;
  a.axis = axis;
  a.start = start;
  a.length = length;
  return x.tape->apply(Primitive::kSlice, {x}, a);
}
template <typename S>
Var<S> global_avg_pool(Var<S> x) { return x.tape->apply(Primitive::kGlobalAvgPool, {x}); }
template <typename S>
Var<S> channel_max(Var<S> x) { return x.tape->apply(Primitive::kChannelMax, {x}); }
template <typename S>
Var<S> channel_min(Var<S> x) { return x.tape->apply(Primitive::kChannelMin, {x}); }
template <typename S>
Var<S> channel_mean(Var<S> x) { return x.tape->apply(Primitive::kChannelMean, {x}); }
template <typename S>
Var<S> spatial_mean(Var<S> x) { return x.tape->apply(Primitive::kSpatialMean, {x}); }
template <typename S>
Var<S> mean(Var<S> x) { return x.tape->apply(Primitive::kMean, {x}); }
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, std::shared_ptr<const std::vector<int>> labels) {
  Attributes a;
  a.labels = std::move(labels);
  return logits.tape->apply(Primitive::kSoftmaxCrossEntropy, {logits}, a);
}

}  // namespace ops

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return ops::add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return ops::sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return ops::mul(a, b); }
template <typename S>
Var<S> operator/(Var<S> a, Var<S> b) { return ops::div(a, b); }

}  // namespace afuse
