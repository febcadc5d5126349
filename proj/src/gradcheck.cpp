#include "afuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

namespace {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

double eval_input(const ScalarFn& f, const Tensor<double>& x) {
  Tape<double> tape;
  return f(tape, tape.input("x", x)).value().item();
}

double eval_params(const ParamScalarFn& f, const ParameterStore<double>& params) {
  Tape<double> tape(params);
  return f(tape).value().item();
}

}  // namespace

double finite_difference_check(const ScalarFn& f, const Tensor<double>& x, double step) {
  Tape<double> tape;
  auto loss = f(tape, tape.input("x", x));
  if (!std::isfinite(loss.value().item())) {
    throw NumericalError("finite_difference_check: function is not finite at the base point");
  }
  const Tensor<double> analytic = tape.backward(loss).at("x");
  double worst = 0.0;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = eval_input(f, probe);
    probe[i] = x[i] - step;
    const double down = eval_input(f, probe);
    probe[i] = x[i];
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * step)));
  }
  return worst;
}

double finite_difference_check(const ParamScalarFn& f, const ParameterStore<double>& params, std::size_t max_coords,
                               std::uint64_t seed, double step, const std::string& only_prefix) {
  Tape<double> tape(params);
  auto loss = f(tape);
  if (!std::isfinite(loss.value().item())) {
    throw NumericalError("finite_difference_check: function is not finite at the base point");
  }
  const Gradients<double> analytic = tape.backward(loss);

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : params) {
    if (!starts_with(name, only_prefix)) continue;
    for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(name, i);
  }
  if (max_coords != 0 && coords.size() > max_coords) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }

  double worst = 0.0;
  ParameterStore<double> probe = params;
  for (const auto& [name, i] : coords) {
    Tensor<double>& t = probe.at(name);
    const double base = t[i];
    t[i] = base + step;
    const double up = eval_params(f, probe);
    t[i] = base - step;
    const double down = eval_params(f, probe);
    t[i] = base;
    worst = std::max(worst, relative_error(analytic.at(name)[i], (up - down) / (2 * step)));
  }
  return worst;
}

}  // namespace afuse
