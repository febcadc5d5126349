#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "afuse/errors.hpp"
#include "afuse/fusion_net.hpp"
#include "afuse/gradcheck.hpp"
#include "afuse/gradient_suite.hpp"
#include "afuse/losses.hpp"
#include "afuse/random.hpp"

using namespace afuse;

namespace {

Tensor<double> random_tensor(const Shape& s, std::uint64_t seed, double lo = -2, double hi = 2) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

}  // namespace

TEST_CASE("tensor shape and data length agree") {
  Tensor<float> t({2, 3, 4, 5});
  CHECK(t.size() == numel(t.shape()));
  CHECK(t.size() == 120);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.0f, 2.0f, 3.0f}), ValidationError);
}

TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
  Tape<double> tape;
  const auto img = random_tensor({2, 1, 5, 6}, 1);
  auto x = tape.constant(img);
  auto w = tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0));
  auto b = tape.constant(Tensor<double>({1}, 0.0));
  CHECK(ops::conv2d(x, w, b).value() == img);
}

TEST_CASE("3x3 ones kernel on a constant image counts in-bounds taps") {
  const double c = 0.7;
  Tape<double> tape;
  auto out = ops::conv2d(tape.constant(Tensor<double>({1, 1, 4, 4}, c)), tape.constant(Tensor<double>({1, 1, 3, 3}, 1.0)),
                         tape.constant(Tensor<double>({1}, 0.0)))
                 .value();
  REQUIRE(out.shape() == Shape{1, 1, 4, 4});
  // taps inside a zero-padded 4x4 image, by hand
  const int taps[4][4] = {{4, 6, 6, 4}, {6, 9, 9, 6}, {6, 9, 9, 6}, {4, 6, 6, 4}};
  for (int h = 0; h < 4; ++h) {
    for (int w = 0; w < 4; ++w) CHECK(out.at(0, 0, h, w) == doctest::Approx(taps[h][w] * c).epsilon(1e-14));
  }
}

TEST_CASE("dilated same-padding convolution keeps the spatial size") {
  Tape<float> tape;
  auto out = ops::conv2d(tape.constant(Tensor<float>({1, 2, 7, 5}, 1.0f)), tape.constant(Tensor<float>({3, 2, 3, 3}, 1.0f)),
                         tape.constant(Tensor<float>({3})), 2);
  CHECK(out.shape() == Shape{1, 3, 7, 5});
}

TEST_CASE("channel max of (1,3,2) is 3") {
  Tape<double> tape;
  auto out = ops::channel_max(tape.constant(Tensor<double>({1, 3, 1, 1}, {1.0, 3.0, 2.0})));
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.value().item() == 3.0);
}

TEST_CASE("shape errors name the primitive and the extents") {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3, 4, 4}));
  auto b = tape.constant(Tensor<float>({2, 5, 4, 4}));
  try {
    ops::add(a, b);
    FAIL("mismatched add was accepted");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("add") != std::string::npos);
    CHECK(what.find("(2,3,4,4)") != std::string::npos);
    CHECK(what.find("(2,5,4,4)") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::conv2d(a, tape.constant(Tensor<float>({1, 2, 3, 3}))), ValidationError);
  CHECK_THROWS_AS(primitive_from_string("fft"), ValidationError);
  CHECK(primitive_from_string("conv2d") == Primitive::kConv2d);
}

TEST_CASE("gradient of mean is 1/n everywhere") {
  Tape<double> tape;
  auto x = tape.input("x", random_tensor({3, 7}, 2));
  const auto g = tape.backward(ops::mean(x)).at("x");
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(1.0 / 21).epsilon(1e-15));
}

TEST_CASE("gradient of the sum of squares at (1,-2) is (2,-4)") {
  Tape<double> tape;
  auto x = tape.input("x", Tensor<double>({2}, {1.0, -2.0}));
  auto loss = ops::affine(ops::mean(ops::square(x)), 2.0, 0.0);  // sum = n * mean
  const auto g = tape.backward(loss).at("x");
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(-4.0));
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape<double> tape;
  auto x = tape.input("x", random_tensor({2, 2}, 3));
  CHECK_THROWS_AS(tape.backward(ops::relu(x)), ValidationError);
}

TEST_CASE("unreachable leaves get exactly zero gradients") {
  ParameterStore<double> p;
  p.set("used", random_tensor({4}, 4));
  p.set("unused", random_tensor({2, 3}, 5));
  Tape<double> tape(p);
  auto loss = ops::mean(ops::square(tape.param("used")));
  tape.param("unused");
  tape.input("idle", random_tensor({3}, 6));
  const auto g = tape.backward(loss);
  CHECK(g.at("unused") == Tensor<double>({2, 3}));
  CHECK(g.at("idle") == Tensor<double>({3}));
}

TEST_CASE("set_trainable freezes filtered parameters") {
  ParameterStore<double> p;
  p.set("a/w", random_tensor({3}, 7));
  p.set("b/w", random_tensor({3}, 8));
  Tape<double> tape(p);
  tape.set_trainable([](const std::string& n) { return starts_with(n, "a/"); });
  auto loss = ops::mean(tape.param("a/w") * tape.param("b/w"));
  const auto g = tape.backward(loss);
  CHECK(g.at("b/w") == Tensor<double>({3}));
  CHECK(g.at("a/w") != Tensor<double>({3}));
}

TEST_CASE("tape records nodes in topological order") {
  Tape<float> tape;
  auto x = tape.input("x", Tensor<float>({1, 2, 3, 3}, 0.5f));
  auto y = ops::sigmoid(ops::concat({x, ops::relu(x)}));
  ops::mean(ops::channel_mean(y) + ops::channel_max(y));
  for (std::size_t id = 0; id < tape.size(); ++id) {
    for (int in : tape.node(static_cast<int>(id)).inputs) CHECK(in < static_cast<int>(id));
  }
}

TEST_CASE("forward evaluation is pure") {
  const FusionNetwork net(ArchSpec::searched_reference(4));
  const auto params = init_parameters<float>(net.parameter_specs(), 11);
  const auto x = random_tensor({2, 1, 8, 8}, 12, 0, 1).cast<float>();
  const auto y = random_tensor({2, 1, 8, 8}, 13, 0, 1).cast<float>();
  auto run = [&] {
    Tape<float> tape(params);
    return net.forward(tape, tape.constant(x), tape.constant(y)).u.value();
  };
  CHECK(run() == run());
}

TEST_CASE("softmax outputs are positive and normalized along the axis") {
  for (int seed = 0; seed < 10; ++seed) {
    Tape<double> tape;
    const auto s = ops::softmax(tape.constant(random_tensor({2, 5, 3, 3}, 100 + seed, -20, 20)), 1).value();
    for (int n = 0; n < 2; ++n) {
      for (int h = 0; h < 3; ++h) {
        for (int w = 0; w < 3; ++w) {
          double sum = 0;
          for (int c = 0; c < 5; ++c) {
            CHECK(s.at(n, c, h, w) > 0.0);
            sum += s.at(n, c, h, w);
          }
          CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
      }
    }
  }
}

TEST_CASE("finite inputs give finite outputs through every block family") {
  for (const char* code : {"3-C", "3-DC", "5-RB", "3-DB", "SA", "CA"}) {
    const Block b = build_block(OpCode::parse(code), 3, 4, "blk");
    ParamSpecMap spec;
    b.declare(spec);
    const auto params = init_parameters<float>(spec, 3);
    Tape<float> tape(params);
    CHECK(b.forward(tape, tape.constant(random_tensor({2, 3, 6, 6}, 21).cast<float>())).value().all_finite());
  }
}

TEST_CASE("finite_difference_check on simple functions") {
  const ScalarFn mean_fn = [](Tape<double>&, Var<double> x) { return ops::mean(x); };
  CHECK(finite_difference_check(mean_fn, random_tensor({4, 4}, 30)) <= 1e-10);

  Tensor<double> away = random_tensor({50}, 31);
  for (std::size_t i = 0; i < away.size(); ++i) {
    if (std::abs(away[i]) < 0.05) away[i] = away[i] < 0 ? -0.05 : 0.05;
  }
  const ScalarFn relu_fn = [](Tape<double>&, Var<double> x) { return ops::mean(ops::relu(x)); };
  CHECK(finite_difference_check(relu_fn, away) <= 1e-6);

  const ScalarFn log_fn = [](Tape<double>&, Var<double> x) { return ops::mean(ops::log(x)); };
  CHECK_THROWS_AS(finite_difference_check(log_fn, Tensor<double>({2}, {-1.0, 1.0})), NumericalError);
}

TEST_CASE("fusion network forward plus fusion loss on 8x8 passes the finite-difference check") {
  const FusionNetwork net(ArchSpec::searched_reference(4));
  auto params = init_parameters<double>(net.parameter_specs(), 40);
  const auto x = random_tensor({1, 1, 8, 8}, 41, 0.05, 0.95);
  const auto y = random_tensor({1, 1, 8, 8}, 42, 0.05, 0.95);
  const auto sal = saliency_pair(x, y);
  const ParamScalarFn f = [&](Tape<double>& tape) {
    auto xv = tape.constant(x);
    auto yv = tape.constant(y);
    return fusion_loss(net.forward(tape, xv, yv).u, xv, yv, sal, LossWeights{});
  };
  CHECK(finite_difference_check(f, params, 60, 43, 1e-6) <= 1e-4);
}

TEST_CASE("init_parameters is deterministic with zero biases and fan-in scaled kernels") {
  ParamSpecMap spec;
  spec["k/w"] = ParamSpec{{16, 16, 3, 3}, Init::kHeNormal};
  spec["k/b"] = ParamSpec{{16}, Init::kZeros};
  const auto a = init_parameters<float>(spec, 9);
  const auto b = init_parameters<float>(spec, 9);
  CHECK(a == b);
  CHECK(a != init_parameters<float>(spec, 10));
  CHECK(a.at("k/b") == Tensor<float>({16}));

  const auto& w = a.at("k/w");
  double mean = 0, var = 0;
  for (std::size_t i = 0; i < w.size(); ++i) mean += w[i];
  mean /= static_cast<double>(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) var += (w[i] - mean) * (w[i] - mean);
  var /= static_cast<double>(w.size() - 1);
  const double expected = 2.0 / (3 * 3 * 16);
  CHECK(std::abs(var - expected) <= 0.2 * expected);
}

TEST_CASE("parameter store iterates in sorted name order") {
  ParameterStore<float> p;
  for (const char* n : {"z", "a/b", "m", "a/a"}) p.set(n, Tensor<float>({1}));
  std::vector<std::string> names;
  for (const auto& [name, t] : p) names.push_back(name);
  CHECK(std::is_sorted(names.begin(), names.end()));
}

TEST_CASE("gradient suite: every primitive and composite within 1e-4 over 20 seeds") {
  const auto results = run_gradient_suite(20);
  std::set<Primitive> covered;
  std::set<std::string> composites;
  for (const auto& r : results) {
    INFO(r.name << " max relative error " << r.max_error);
    CHECK(r.seeds >= 20);
    CHECK(r.passed());
    if (r.name.starts_with("composite/")) {
      composites.insert(r.name);
    } else {
      covered.insert(primitive_from_string(r.name.substr(0, r.name.find('/'))));
    }
  }
  for (Primitive p : all_primitives()) {
    INFO("primitive " << to_string(p));
    CHECK(covered.contains(p));
  }
  for (const char* c : {"composite/fusion_forward", "composite/fusion_loss", "composite/ssim",
                        "composite/seg_cross_entropy", "composite/mixed_forward_alpha"}) {
    CHECK(composites.contains(c));
  }
}
