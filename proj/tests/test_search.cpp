#include <doctest.h>

#include "afuse/errors.hpp"
#include "afuse/relaxation.hpp"
#include "afuse/search.hpp"
#include "fixtures.hpp"

using namespace afuse;
using namespace afuse::testing;

namespace {

std::vector<OpCode> ops_of(std::initializer_list<const char*> names) {
  std::vector<OpCode> out;
  for (const char* n : names) out.push_back(OpCode::parse(n));
  return out;
}

SearchConfig tiny_search() {
  SearchConfig c;
  c.candidates = ops_of({"3-C", "3-DC", "3-RB"});
  c.base_channels = 4;
  c.warm_start_steps = 3;
  c.param_steps_per_alpha_step = 2;
  c.iterations = 3;
  c.batch_size = 2;
  c.attack = AttackBudget::with_epsilon(2.0 / 255.0, 2);
  return c;
}

/// Output of slot 0 of a supernet with the given alpha row, in double.
struct SlotFixture {
  std::vector<Block> blocks;
  ParameterStore<double> params;
  Tensor<double> input = random_tensor({1, 4, 5, 5}, 21);

  SlotFixture() {
    ParamSpecMap spec;
    for (const auto& c : ops_of({"3-C", "3-DC", "3-RB", "CA"})) {
      blocks.push_back(build_block(c, 4, 4, "slot/" + c.name()));
      blocks.back().declare(spec);
    }
    params = init_parameters<double>(spec, 22);
  }

  Tensor<double> mixed(const Tensor<double>& alpha) const {
    Tape<double> tape(params);
    return mixed_forward(tape, tape.constant(alpha), 0, std::span<const Block>(blocks), tape.constant(input)).value();
  }

  Tensor<double> single(std::size_t i) const {
    Tape<double> tape(params);
    return blocks[i].forward(tape, tape.constant(input)).value();
  }
};

}  // namespace

TEST_CASE("mixed forward with uniform logits is the mean of the candidates") {
  const SlotFixture f;
  const auto out = f.mixed(Tensor<double>({kNumSlots, 4}, 0.3));
  Tensor<double> mean(out.shape());
  for (std::size_t i = 0; i < 4; ++i) mean.array() += f.single(i).array() / 4.0;
  CHECK(max_abs_diff(out, mean) <= 1e-12);
}

TEST_CASE("mixed forward with a +40 logit reproduces that candidate") {
  const SlotFixture f;
  for (std::size_t pick = 0; pick < 4; ++pick) {
    Tensor<double> alpha({kNumSlots, 4});
    alpha[pick] = 40.0;
    CHECK(max_abs_diff(f.mixed(alpha), f.single(pick)) <= 1e-12);
  }
}

TEST_CASE("discretize picks the row argmax with ties to the lowest index") {
  Relaxation r = Relaxation::uniform(ops_of({"3-DC", "7-RB", "3-DB", "CA"}));
  const auto tied = discretize(r, FusionRule::parse("AA"), 8);
  for (const auto& op : tied.slots) CHECK(op == OpCode::parse("3-DC"));
  r.alpha(2, 3) = 0.5;
  r.alpha(4, 1) = 0.1;
  r.alpha(4, 2) = 0.1;
  const auto a = discretize(r, FusionRule::parse("AA"), 8);
  CHECK(a.slots[2] == OpCode::parse("CA"));
  CHECK(a.slots[4] == OpCode::parse("7-RB"));
  CHECK(a.base_channels == 8);
}

TEST_CASE("discretize is invariant to positive scaling and per-row shifts") {
  Rng rng(3);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Relaxation r = Relaxation::uniform(Relaxation::default_candidates());
    for (int i = 0; i < r.alpha.size(); ++i) r.alpha.data()[i] = n(rng);
    const auto base = discretize(r, FusionRule::parse("AA"), 16);
    Relaxation scaled = r;
    scaled.alpha *= 3.7;
    scaled.alpha.row(1).array() += 5.0;
    CHECK(discretize(scaled, FusionRule::parse("AA"), 16) == base);
    const auto w = r.weights();
    for (int s = 0; s < kNumSlots; ++s) CHECK(w.row(s).sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("a singleton search space always returns its only operation") {
  SearchConfig c = tiny_search();
  c.candidates = ops_of({"3-RB"});
  const auto data = generate_dataset(small_scene(), 8);
  const auto r = hds_search(c, data.samples.slice(0, 6), data.samples.slice(6, 2));
  for (const auto& op : r.arch.slots) CHECK(op == OpCode::parse("3-RB"));
}

TEST_CASE("a small alpha step does not increase the validation loss") {
  const SearchConfig c = tiny_search();
  const Model supernet = search_model(c);
  const auto data = generate_dataset(small_scene(4), 40);
  int checked = 0;
  for (int state = 0; state < 20; ++state) {
    auto params = init_parameters<float>(supernet.parameter_specs(), 100 + static_cast<std::uint64_t>(state));
    params.set(kAlphaName, random_tensor<float>(params.at(kAlphaName).shape(), 200 + state, -1, 1));
    const auto batch = data.samples.slice(2 * state, 2);
    Sgd<float> opt({1e-4, 0.0});
    const double before = alpha_step(supernet, params, opt, batch, c.loss);
    Sgd<float> probe({1e-4, 0.0});
    auto copy = params;
    const double after = alpha_step(supernet, copy, probe, batch, c.loss);
    CHECK(after <= before + 1e-6);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("an alpha step leaves every other parameter untouched") {
  const SearchConfig c = tiny_search();
  const Model supernet = search_model(c);
  const auto data = generate_dataset(small_scene(5), 2);
  auto params = init_parameters<float>(supernet.parameter_specs(), 7);
  const auto before = params;
  Sgd<float> opt({1e-2, 0.9});
  alpha_step(supernet, params, opt, data.samples, c.loss);
  for (const auto& [name, t] : params) {
    if (name == kAlphaName) {
      CHECK(t != before.at(name));
    } else {
      CHECK(t == before.at(name));
    }
  }
}

TEST_CASE("search is deterministic and records one step per iteration") {
  const SearchConfig c = tiny_search();
  const auto data = generate_dataset(small_scene(6), 10);
  const auto train = data.samples.slice(0, 8), val = data.samples.slice(8, 2);
  const auto a = hds_search(c, train, val);
  const auto b = hds_search(c, train, val);
  CHECK(a.params == b.params);
  CHECK(a.arch == b.arch);
  CHECK(a.history.size() == static_cast<std::size_t>(c.iterations));
  CHECK(a.warm_curve.size() == static_cast<std::size_t>(c.warm_start_steps));
  for (const auto& step : a.history) {
    for (int s = 0; s < kNumSlots; ++s) CHECK(step.weights.row(s).sum() == doctest::Approx(1.0));
  }
  const auto report = search_report(c, a);
  CHECK(report.at("arch") == a.arch.to_string());
}

TEST_CASE("discrete parameters extracted from a sharpened supernet reproduce its output") {
  const SearchConfig c = tiny_search();
  const FusionNetwork supernet(c.candidates, c.rule, c.base_channels);
  auto params = init_parameters<double>(supernet.parameter_specs(), 8);
  Tensor<double> alpha({kNumSlots, 3});
  const int picks[kNumSlots] = {0, 1, 2, 2, 1, 0};
  ArchSpec chosen = ArchSpec::uniform(c.candidates[0], c.rule, c.base_channels);
  for (int s = 0; s < kNumSlots; ++s) {
    alpha[static_cast<std::size_t>(s * 3 + picks[s])] = 40.0;
    chosen.slots[static_cast<std::size_t>(s)] = c.candidates[static_cast<std::size_t>(picks[s])];
  }
  params.set(kAlphaName, alpha);
  const FusionNetwork discrete(chosen);
  const auto extracted = extract_discrete_parameters(params, supernet, chosen);
  const auto x = random_tensor({1, 1, 8, 8}, 9, 0, 1), y = random_tensor({1, 1, 8, 8}, 10, 0, 1);
  Tape<double> t1(params), t2(extracted);
  const auto u1 = supernet.forward(t1, t1.constant(x), t1.constant(y)).u.value();
  const auto u2 = discrete.forward(t2, t2.constant(x), t2.constant(y)).u.value();
  CHECK(max_abs_diff(u1, u2) <= 1e-12);
}

TEST_CASE("search config validation") {
  SearchConfig c = tiny_search();
  c.candidates.clear();
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_search();
  c.iterations = -1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
