#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "afuse/parameters.hpp"
#include "afuse/tape.hpp"

namespace afuse {

/// A scalar-valued function of one input tensor, expressed on a tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// A scalar-valued function of a bound parameter store.
using ParamScalarFn = std::function<Var<double>(Tape<double>&)>;

inline constexpr double kFiniteDifferenceStep = 1e-4;

/// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|),
/// numeric by central differences. Throws NumericalError if f is not finite at x.
double finite_difference_check(const ScalarFn& f, const Tensor<double>& x, double step = kFiniteDifferenceStep);

/// Same measure over parameter coordinates. When `max_coords` is nonzero a
/// seeded sample of that many coordinates is checked instead of all of them.
/// A non-empty `only_prefix` restricts the check to parameters under it.
double finite_difference_check(const ParamScalarFn& f, const ParameterStore<double>& params,
                               std::size_t max_coords = 0, std::uint64_t seed = 0,
                               double step = kFiniteDifferenceStep, const std::string& only_prefix = {});

}  // namespace afuse
