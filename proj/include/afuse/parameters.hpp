#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "afuse/tensor.hpp"

namespace afuse {

enum class Init {
  kHeNormal,  // zero-mean normal, std sqrt(2 / fan_in), fan_in = product of all but the leading extent
  kZeros,
  kConstant,
};

struct ParamSpec {
  Shape shape;
  Init init = Init::kHeNormal;
  double value = 0.0;  // kConstant only
};

/// Hierarchical parameter name ("fusion/slot0/conv1/w") to its declaration.
using ParamSpecMap = std::map<std::string, ParamSpec>;

template <typename Scalar>
using TensorMap = std::map<std::string, Tensor<Scalar>>;

/// Named parameter tensors; iteration order is sorted by name.
template <typename Scalar>
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  const TensorMap<Scalar>& tensors() const { return tensors_; }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  std::size_t size() const { return tensors_.size(); }
  std::size_t parameter_count() const;

  bool contains(const std::string& name) const { return tensors_.contains(name); }
  const Tensor<Scalar>& at(const std::string& name) const;
  Tensor<Scalar>& at(const std::string& name);
  /// Inserts or replaces.
  void set(const std::string& name, Tensor<Scalar> value);

  /// Parameters whose name starts with `prefix`.
  ParameterStore subset(const std::string& prefix) const;
  /// Copies every entry of `other` into this store, replacing duplicates.
  void merge(const ParameterStore& other);

  template <typename To>
  ParameterStore<To> cast() const {
    ParameterStore<To> out(seed_);
    for (const auto& [name, t] : tensors_) {
      out.set(name, t.template cast<To>());
    }
    return out;
  }

  bool all_finite() const;

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    return a.tensors_ == b.tensors_;
  }

 private:
  std::uint64_t seed_ = 0;
  TensorMap<Scalar> tensors_;
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;

/// Deterministic initialization. Each parameter draws from its own stream
/// derived from (seed, name), so adding a parameter leaves the others unchanged.
template <typename Scalar>
ParameterStore<Scalar> init_parameters(const ParamSpecMap& spec, std::uint64_t seed);

bool starts_with(const std::string& name, const std::string& prefix);

}  // namespace afuse
