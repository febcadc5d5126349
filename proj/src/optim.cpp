#include "afuse/optim.hpp"

#include <cmath>

#include "afuse/errors.hpp"

namespace afuse {

template <typename S>
void Adam<S>::step(ParameterStore<S>& params, const Gradients<S>& grads, const ParamFilter& filter) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name) || (filter && !filter(name))) continue;
    Tensor<S>& p = params.at(name);
    Moments& st = state_[name];
    if (st.m.empty()) {
      st.m = Tensor<S>(p.shape());
      st.v = Tensor<S>(p.shape());
    }
    ++st.t;
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    st.m.array() = b1 * st.m.array() + (S(1) - b1) * g.array();
    st.v.array() = b2 * st.v.array() + (S(1) - b2) * g.array().square();
    const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t)));
    const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t)));
    const S lr = static_cast<S>(cfg_.lr);
    if (cfg_.weight_decay != 0.0) p.array() *= S(1) - lr * static_cast<S>(cfg_.weight_decay);
    p.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + static_cast<S>(cfg_.eps));
  }
}

template <typename S>
void Sgd<S>::step(ParameterStore<S>& params, const Gradients<S>& grads, const ParamFilter& filter) {
  const S lr = static_cast<S>(cfg_.lr);
  const S mu = static_cast<S>(cfg_.momentum);
  for (const auto& [name, g] : grads) {
    if (!params.contains(name) || (filter && !filter(name))) continue;
    Tensor<S>& p = params.at(name);
    if (cfg_.momentum == 0.0) {
      p.array() -= lr * g.array();
      continue;
    }
    Tensor<S>& v = velocity_[name];
    if (v.empty()) v = Tensor<S>(p.shape());
    v.array() = mu * v.array() + g.array();
    p.array() -= lr * v.array();
  }
}

template <typename S>
void check_finite(const Gradients<S>& grads, const std::string& context) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericalError(context + ": non-finite gradient for '" + name + "'");
  }
}

template class Adam<float>;
template class Adam<double>;
template class Sgd<float>;
template class Sgd<double>;
template void check_finite(const Gradients<float>&, const std::string&);
template void check_finite(const Gradients<double>&, const std::string&);

}  // namespace afuse
