#pragma once

#include <functional>
#include <map>
#include <string>

#include "afuse/parameters.hpp"
#include "afuse/tape.hpp"

namespace afuse {

/// Selects the parameters an optimizer updates. Empty means all.
using ParamFilter = std::function<bool(const std::string&)>;

inline ParamFilter prefix_filter(std::string prefix) {
  return [p = std::move(prefix)](const std::string& name) { return starts_with(name, p); };
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(ParameterStore<S>& params, const Gradients<S>& grads, const ParamFilter& filter = {});

 private:
  struct Moments {
    Tensor<S> m;
    Tensor<S> v;
    long t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, Moments> state_;
};

struct SgdConfig {
  double lr = 1e-2;
  double momentum = 0.0;
};

/// Heavy-ball SGD; momentum buffers persist across step() calls.
template <typename S>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg = {}) : cfg_(cfg) {}

  const SgdConfig& config() const { return cfg_; }

  void step(ParameterStore<S>& params, const Gradients<S>& grads, const ParamFilter& filter = {});

 private:
  SgdConfig cfg_;
  std::map<std::string, Tensor<S>> velocity_;
};

/// Throws NumericalError naming the first non-finite gradient.
template <typename S>
void check_finite(const Gradients<S>& grads, const std::string& context);

extern template class Adam<float>;
extern template class Adam<double>;
extern template class Sgd<float>;
extern template class Sgd<double>;

}  // namespace afuse
