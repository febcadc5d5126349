#include "afuse/gradient_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>

#include "afuse/fusion_net.hpp"
#include "afuse/gradcheck.hpp"
#include "afuse/losses.hpp"
#include "afuse/random.hpp"
#include "afuse/seg_task.hpp"

namespace afuse {

namespace {

using T = Tensor<double>;
using V = Var<double>;

// Central differences on composites use a smaller step so kinks inside the
// network are rarely straddled.
constexpr double kCompositeStep = 1e-6;
constexpr std::size_t kCompositeCoords = 40;

T uniform(Rng& rng, const Shape& s, double lo, double hi) {
  T t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Values with |v| in [0.05, 2]: clear of the relu kink.
T away_from_zero(Rng& rng, const Shape& s) {
  T t = uniform(rng, s, 0.05, 2.0);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (flip(rng)) t[i] = -t[i];
  }
  return t;
}

/// Per pixel, channels hold distinct values at least 0.1 apart.
T distinct_channels(Rng& rng, const Shape& s) {
  T t(s);
  const int B = s[0], C = s[1], P = s[2] * s[3];
  std::vector<int> order(static_cast<std::size_t>(C));
  std::uniform_real_distribution<double> jitter(0.0, 0.05);
  for (int n = 0; n < B; ++n) {
    for (int p = 0; p < P; ++p) {
      for (int c = 0; c < C; ++c) order[static_cast<std::size_t>(c)] = c;
      std::shuffle(order.begin(), order.end(), rng);
      for (int c = 0; c < C; ++c) {
        t[(static_cast<std::size_t>(n) * C + c) * P + p] = 0.15 * order[static_cast<std::size_t>(c)] + jitter(rng) - 0.3;
      }
    }
  }
  return t;
}

/// mean(out * R) for a fixed random R, so every output coordinate matters.
V weighted_mean(Tape<double>& tape, V out, const T& r) { return ops::mean(out * tape.constant(r)); }

using Build = std::function<ParameterStore<double>(Rng&)>;
using Body = std::function<V(Tape<double>&, const ParameterStore<double>&)>;

struct Case {
  Case(std::string n, Build b, Body f, bool comp = false, std::string prefix = {})
      : name(std::move(n)), build(std::move(b)), body(std::move(f)), composite(comp), only_prefix(std::move(prefix)) {}

  std::string name;
  Build build;
  Body body;
  bool composite;
  std::string only_prefix;  // restrict the checked coordinates
};

ParameterStore<double> store(std::initializer_list<std::pair<const char*, T>> entries) {
  ParameterStore<double> p;
  for (const auto& [name, t] : entries) p.set(name, t);
  return p;
}

/// Cases for a primitive of one input with output shaped like the input.
Case unary(std::string name, std::function<T(Rng&)> make, std::function<V(V)> op, Shape out_shape) {
  auto r = std::make_shared<T>();
  return Case{std::move(name),
              [make, r, out_shape](Rng& rng) {
                *r = uniform(rng, out_shape, -1, 1);
                return store({{"a", make(rng)}});
              },
              [op, r](Tape<double>& tape, const ParameterStore<double>&) {
                return weighted_mean(tape, op(tape.param("a")), *r);
              }};
}

Case binary(std::string name, Primitive kind, Shape sa, Shape sb, bool positive_b = false, bool separated = false) {
  auto r = std::make_shared<T>();
  return Case{std::move(name),
              [=](Rng& rng) {
                T a = uniform(rng, sa, -2, 2);
                T b = positive_b ? uniform(rng, sb, 0.5, 1.5) : uniform(rng, sb, -2, 2);
                if (separated) {
                  // keep |a - b| >= 0.05 everywhere; sb equals sa here
                  for (std::size_t i = 0; i < a.size(); ++i) {
                    if (std::abs(a[i] - b[i]) < 0.05) b[i] = a[i] + (b[i] >= a[i] ? 0.05 : -0.05);
                  }
                }
                *r = uniform(rng, numel(sa) >= numel(sb) ? sa : sb, -1, 1);
                return store({{"a", a}, {"b", b}});
              },
              [kind, r](Tape<double>& tape, const ParameterStore<double>&) {
                return weighted_mean(tape, tape.apply(kind, {tape.param("a"), tape.param("b")}), *r);
              }};
}

std::vector<Case> primitive_cases() {
  const Shape s{2, 3, 5, 5};
  std::vector<Case> cases;

  for (int dilation : {1, 2}) {
    auto r = std::make_shared<T>();
    cases.push_back({"conv2d/d" + std::to_string(dilation),
                     [r](Rng& rng) {
                       *r = uniform(rng, {2, 4, 6, 6}, -1, 1);
                       return store({{"x", uniform(rng, {2, 3, 6, 6}, -1, 1)},
                                     {"w", uniform(rng, {4, 3, 3, 3}, -0.5, 0.5)},
                                     {"b", uniform(rng, {4}, -0.5, 0.5)}});
                     },
                     [r, dilation](Tape<double>& tape, const ParameterStore<double>&) {
                       return weighted_mean(
                           tape, ops::conv2d(tape.param("x"), tape.param("w"), tape.param("b"), dilation), *r);
                     }});
  }
  {
    auto r = std::make_shared<T>();
    cases.push_back({"conv2d/1x1-nobias",
                     [r](Rng& rng) {
                       *r = uniform(rng, {2, 4, 5, 5}, -1, 1);
                       return store({{"x", uniform(rng, {2, 3, 5, 5}, -1, 1)}, {"w", uniform(rng, {4, 3, 1, 1}, -1, 1)}});
                     },
                     [r](Tape<double>& tape, const ParameterStore<double>&) {
                       return weighted_mean(tape, ops::conv2d(tape.param("x"), tape.param("w")), *r);
                     }});
  }
  cases.push_back(binary("add", Primitive::kAdd, s, s));
  cases.push_back(binary("add/broadcast", Primitive::kAdd, s, {2, 1, 5, 5}));
  cases.push_back(binary("sub", Primitive::kSub, s, s));
  cases.push_back(binary("sub/broadcast", Primitive::kSub, s, {1}));
  cases.push_back(binary("mul", Primitive::kMul, s, s));
  cases.push_back(binary("mul/broadcast", Primitive::kMul, s, {2, 3, 1, 1}));
  cases.push_back(binary("div", Primitive::kDiv, s, s, true));
  cases.push_back(binary("div/broadcast", Primitive::kDiv, s, {2, 1, 1, 1}, true));
  cases.push_back(binary("maximum", Primitive::kMaximum, s, s, false, true));

  cases.push_back(unary("relu", [s](Rng& rng) { return away_from_zero(rng, s); }, [](V a) { return ops::relu(a); }, s));
  cases.push_back(unary("sigmoid", [s](Rng& rng) { return uniform(rng, s, -3, 3); }, [](V a) { return ops::sigmoid(a); }, s));
  cases.push_back(unary("log", [s](Rng& rng) { return uniform(rng, s, 0.2, 2); }, [](V a) { return ops::log(a); }, s));
  cases.push_back(unary("affine", [s](Rng& rng) { return uniform(rng, s, -2, 2); },
                        [](V a) { return ops::affine(a, -1.7, 0.3); }, s));
  cases.push_back(unary("square", [s](Rng& rng) { return uniform(rng, s, -2, 2); }, [](V a) { return ops::square(a); }, s));
  cases.push_back(unary("sqrt", [s](Rng& rng) { return uniform(rng, s, 0.2, 2); }, [](V a) { return ops::sqrt(a); }, s));
  cases.push_back(unary(
      "clip",
      [s](Rng& rng) {
        T t = uniform(rng, s, -2, 2);
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (std::abs(std::abs(t[i]) - 0.5) < 0.05) t[i] = t[i] > 0 ? (t[i] < 0.5 ? 0.4 : 0.6) : (t[i] > -0.5 ? -0.4 : -0.6);
        }
        return t;
      },
      [](V a) { return ops::clip(a, -0.5, 0.5); }, s));
  cases.push_back(unary("softmax", [s](Rng& rng) { return uniform(rng, s, -2, 2); }, [](V a) { return ops::softmax(a, 1); }, s));
  {
    auto r = std::make_shared<T>();
    cases.push_back({"concat",
                     [r](Rng& rng) {
                       *r = uniform(rng, {2, 5, 4, 4}, -1, 1);
                       return store({{"a", uniform(rng, {2, 2, 4, 4}, -1, 1)}, {"b", uniform(rng, {2, 3, 4, 4}, -1, 1)}});
                     },
                     [r](Tape<double>& tape, const ParameterStore<double>&) {
                       return weighted_mean(tape, ops::concat({tape.param("a"), tape.param("b")}), *r);
                     }});
  }
  cases.push_back(unary("slice", [](Rng& rng) { return uniform(rng, {2, 3, 9, 9}, -1, 1); },
                        [](V a) { return ops::slice(ops::slice(a, 2, 1, 5), 3, 3, 5); }, {2, 3, 5, 5}));
  cases.push_back(unary("global_avg_pool", [s](Rng& rng) { return uniform(rng, s, -2, 2); },
                        [](V a) { return ops::global_avg_pool(a); }, {2, 3, 1, 1}));
  cases.push_back(unary("channel_max", [s](Rng& rng) { return distinct_channels(rng, s); },
                        [](V a) { return ops::channel_max(a); }, {2, 1, 5, 5}));
  cases.push_back(unary("channel_min", [s](Rng& rng) { return distinct_channels(rng, s); },
                        [](V a) { return ops::channel_min(a); }, {2, 1, 5, 5}));
  cases.push_back(unary("channel_mean", [s](Rng& rng) { return uniform(rng, s, -2, 2); },
                        [](V a) { return ops::channel_mean(a); }, {2, 1, 5, 5}));
  cases.push_back(unary("spatial_mean", [s](Rng& rng) { return uniform(rng, s, -2, 2); },
                        [](V a) { return ops::spatial_mean(a); }, {2, 1, 1, 1}));
  cases.push_back(unary("mean", [s](Rng& rng) { return uniform(rng, s, -2, 2); }, [](V a) { return ops::mean(a); }, {1}));
  {
    auto labels = std::make_shared<std::vector<int>>();
    cases.push_back({"softmax_cross_entropy",
                     [labels](Rng& rng) {
                       std::uniform_int_distribution<int> k(0, 3);
                       labels->resize(2 * 5 * 5);
                       for (auto& l : *labels) l = k(rng);
                       return store({{"a", uniform(rng, {2, 4, 5, 5}, -2, 2)}});
                     },
                     [labels](Tape<double>& tape, const ParameterStore<double>&) {
                       return ops::softmax_cross_entropy(tape.param("a"), std::make_shared<const std::vector<int>>(*labels));
                     }});
  }
  return cases;
}

ParameterStore<double> with_images(ParameterStore<double> p, Rng& rng, int batch, int size) {
  p.set("in/x", uniform(rng, {batch, 1, size, size}, 0.05, 0.95));
  p.set("in/y", uniform(rng, {batch, 1, size, size}, 0.05, 0.95));
  return p;
}

std::vector<Case> composite_cases() {
  std::vector<Case> cases;
  constexpr int kC = 4, kSize = 8, kBatch = 2;
  {
    auto net = std::make_shared<FusionNetwork>(ArchSpec::searched_reference(kC));
    auto r = std::make_shared<T>();
    cases.push_back({"composite/fusion_forward",
                     [net, r](Rng& rng) {
                       *r = uniform(rng, {kBatch, 1, kSize, kSize}, -1, 1);
                       return with_images(init_parameters<double>(net->parameter_specs(), rng()), rng, kBatch, kSize);
                     },
                     [net, r](Tape<double>& tape, const ParameterStore<double>&) {
                       return weighted_mean(tape, net->forward(tape, tape.param("in/x"), tape.param("in/y")).u, *r);
                     },
                     true});
  }
  {
    cases.push_back({"composite/fusion_loss",
                     [](Rng& rng) {
                       ParameterStore<double> p = with_images({}, rng, kBatch, kSize);
                       p.set("u", uniform(rng, {kBatch, 1, kSize, kSize}, 0.05, 0.95));
                       return p;
                     },
                     [](Tape<double>& tape, const ParameterStore<double>& p) {
                       const auto sal = saliency_pair(p.at("in/x"), p.at("in/y"));
                       return fusion_loss(tape.param("u"), tape.constant(p.at("in/x")), tape.constant(p.at("in/y")), sal,
                                          LossWeights{});
                     },
                     true});
  }
  {
    cases.push_back({"composite/ssim",
                     [](Rng& rng) {
                       return store({{"a", uniform(rng, {kBatch, 1, kSize, kSize}, 0, 1)},
                                     {"b", uniform(rng, {kBatch, 1, kSize, kSize}, 0, 1)}});
                     },
                     [](Tape<double>& tape, const ParameterStore<double>&) {
                       return ssim(tape.param("a"), tape.param("b"));
                     },
                     true});
  }
  {
    auto head = std::make_shared<SegHead>(4, kC);
    auto labels = std::make_shared<LabelMap>();
    cases.push_back({"composite/seg_cross_entropy",
                     [head, labels](Rng& rng) {
                       std::uniform_int_distribution<int> k(0, 3);
                       labels->resize(kBatch * kSize * kSize);
                       for (auto& l : *labels) l = k(rng);
                       ParameterStore<double> p = init_parameters<double>(head->parameter_specs(), rng());
                       p.set("in/u", uniform(rng, {kBatch, 1, kSize, kSize}, 0, 1));
                       return p;
                     },
                     [head, labels](Tape<double>& tape, const ParameterStore<double>&) {
                       return cross_entropy(head->forward(tape, tape.param("in/u")), *labels);
                     },
                     true});
  }
  {
    auto net = std::make_shared<FusionNetwork>(Relaxation::default_candidates(), FusionRule::parse("AA"), kC);
    auto r = std::make_shared<T>();
    cases.push_back({"composite/mixed_forward_alpha",
                     [net, r](Rng& rng) {
                       *r = uniform(rng, {kBatch, 1, kSize, kSize}, -1, 1);
                       ParameterStore<double> p = init_parameters<double>(net->parameter_specs(), rng());
                       p.set(kAlphaName, uniform(rng, {kNumSlots, static_cast<int>(net->candidates().size())}, -1, 1));
                       return with_images(p, rng, kBatch, kSize);
                     },
                     [net, r](Tape<double>& tape, const ParameterStore<double>& p) {
                       auto x = tape.constant(p.at("in/x"));
                       auto y = tape.constant(p.at("in/y"));
                       return weighted_mean(tape, net->forward(tape, x, y).u, *r);
                     },
                     true, kAlphaName});
  }
  return cases;
}

}  // namespace

std::vector<GradientCheck> run_gradient_suite(int seeds) {
  std::vector<GradientCheck> out;
  auto cases = primitive_cases();
  for (auto& c : composite_cases()) cases.push_back(std::move(c));
  for (const auto& c : cases) {
    GradientCheck check{c.name, 0.0, seeds};
    for (int s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(static_cast<std::uint64_t>(s), fnv1a(c.name)));
      const ParameterStore<double> params = c.build(rng);
      const ParamScalarFn f = [&](Tape<double>& tape) { return c.body(tape, params); };
      std::size_t coords = 0;
      double step = kFiniteDifferenceStep;
      if (c.composite) {
        coords = kCompositeCoords;
        step = kCompositeStep;
      }
      check.max_error = std::max(check.max_error, finite_difference_check(f, params, coords, rng(), step, c.only_prefix));
    }
    out.push_back(check);
  }
  return out;
}

}  // namespace afuse
