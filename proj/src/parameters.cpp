#include "afuse/parameters.hpp"

#include <cmath>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

bool starts_with(const std::string& name, const std::string& prefix) {
  return name.compare(0, prefix.size(), prefix) == 0;
}

template <typename Scalar>
std::size_t ParameterStore<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) {
    n += t.size();
  }
  return n;
}

template <typename Scalar>
const Tensor<Scalar>& ParameterStore<Scalar>::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw ValidationError("unknown parameter '" + name + "'");
  }
  return it->second;
}

template <typename Scalar>
Tensor<Scalar>& ParameterStore<Scalar>::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw ValidationError("unknown parameter '" + name + "'");
  }
  return it->second;
}

template <typename Scalar>
void ParameterStore<Scalar>::set(const std::string& name, Tensor<Scalar> value) {
  tensors_.insert_or_assign(name, std::move(value));
}

template <typename Scalar>
ParameterStore<Scalar> ParameterStore<Scalar>::subset(const std::string& prefix) const {
  ParameterStore out(seed_);
  for (const auto& [name, t] : tensors_) {
    if (starts_with(name, prefix)) {
      out.tensors_.emplace(name, t);
    }
  }
  return out;
}

template <typename Scalar>
void ParameterStore<Scalar>::merge(const ParameterStore& other) {
  for (const auto& [name, t] : other.tensors_) {
    tensors_.insert_or_assign(name, t);
  }
}

template <typename Scalar>
bool ParameterStore<Scalar>::all_finite() const {
  for (const auto& [name, t] : tensors_) {
    if (!t.all_finite()) {
      return false;
    }
  }
  return true;
}

template <typename Scalar>
ParameterStore<Scalar> init_parameters(const ParamSpecMap& spec, std::uint64_t seed) {
  ParameterStore<Scalar> store(seed);
  for (const auto& [name, ps] : spec) {
    Tensor<Scalar> t(ps.shape);
    switch (ps.init) {
      case Init::kZeros:
        break;
      case Init::kConstant:
        t.array().setConstant(static_cast<Scalar>(ps.value));
        break;
      case Init::kHeNormal: {
        std::size_t fan_in = ps.shape.size() > 1 ? numel(ps.shape) / ps.shape[0] : numel(ps.shape);
        Rng rng(derive_seed(seed, fnv1a(name)));
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : t.values()) {
          v = static_cast<Scalar>(normal(rng));
        }
        break;
      }
    }
    store.set(name, std::move(t));
  }
  return store;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template ParameterStore<float> init_parameters(const ParamSpecMap&, std::uint64_t);
template ParameterStore<double> init_parameters(const ParamSpecMap&, std::uint64_t);

}  // namespace afuse
