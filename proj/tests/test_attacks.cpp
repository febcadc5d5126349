#include <doctest.h>

#include <filesystem>

#include "afuse/attacks.hpp"
#include "afuse/errors.hpp"
#include "fixtures.hpp"

using namespace afuse;
using namespace afuse::testing;

namespace {

const AttackObjective kSumObjective = [](Tape<float>&, Var<float> x, Var<float> y) {
  return ops::mean(x) + ops::mean(y);
};

}  // namespace

TEST_CASE("project_linf clamps each element to the ball") {
  const Tensor<double> d({4}, {-0.5, -0.01, 0.02, 0.3});
  CHECK(project_linf(d, 0.1) == Tensor<double>({4}, {-0.1, -0.01, 0.02, 0.1}));
  CHECK(project_linf(d, 0.0) == Tensor<double>({4}, {0.0, 0.0, 0.0, 0.0}));
  CHECK_THROWS_AS(project_linf(d, -1.0), ValidationError);
}

TEST_CASE("one ascent step on a linear objective moves every pixel by min(eta, epsilon)") {
  const Tensor<float> x({1, 1, 4, 4}, 0.5f);
  for (auto [eps, eta] : {std::pair{0.03, 0.01}, std::pair{0.005, 0.01}}) {
    AttackBudget b;
    b.epsilon = eps;
    b.eta = eta;
    b.steps = 1;
    const auto r = pgd_attack(kSumObjective, x, x, b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(r.delta_ir[i] == doctest::Approx(std::min(eta, eps)).epsilon(1e-5));
      CHECK(r.delta_vis[i] == doctest::Approx(std::min(eta, eps)).epsilon(1e-5));
    }
    CHECK(r.loss_trace.size() == 2);
    CHECK(r.final_loss() > r.clean_loss());
  }
}

TEST_CASE("k steps saturate at the budget") {
  const Tensor<float> x({1, 1, 3, 3}, 0.5f);
  const auto b = AttackBudget::with_epsilon(8.0 / 255.0, 10);
  const auto r = pgd_attack(kSumObjective, x, x, b);
  CHECK(linf_distance(r.x_adv, x) <= b.epsilon);
  CHECK(linf_distance(r.x_adv, x) == doctest::Approx(b.epsilon).epsilon(1e-5));
}

TEST_CASE("the attacked image is clipped to [0,1]") {
  const Tensor<float> x({1, 1, 2, 2}, 0.999f);
  const auto r = pgd_attack(kSumObjective, x, x, AttackBudget::with_epsilon(0.05, 5));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.x_adv[i] == 1.0f);
}

TEST_CASE("epsilon zero returns the inputs bit for bit") {
  const auto data = generate_dataset(small_scene(), 4);
  for (bool random_start : {false, true}) {
    auto b = AttackBudget::with_epsilon(0.0, 5);
    b.random_start = random_start;
    const auto r = pgd_attack(small_model(), trained_small_params(), data.samples, b);
    CHECK(r.x_adv == data.samples.x);
    CHECK(r.y_adv == data.samples.y);
  }
}

TEST_CASE("inputs outside [0,1] and bad budgets are rejected") {
  const Tensor<float> bad({1, 1, 2, 2}, 1.5f);
  CHECK_THROWS_AS(pgd_attack(kSumObjective, bad, bad, AttackBudget{}), ValidationError);
  AttackBudget b;
  b.steps = -1;
  const Tensor<float> ok({1, 1, 2, 2}, 0.5f);
  CHECK_THROWS_AS(pgd_attack(kSumObjective, ok, ok, b), ValidationError);
}

TEST_CASE("PGD on a trained model: budget, range and loss increase over 200 attacks") {
  const auto data = generate_dataset(small_scene(7), 200);
  const Model model = small_model();
  const auto& params = trained_small_params();
  int increased = 0;
  for (int i = 0; i < 200; ++i) {
    auto b = AttackBudget::with_epsilon(8.0 / 255.0, 5, static_cast<std::uint64_t>(i));
    b.random_start = i % 2 == 1;
    const auto batch = data.samples.slice(i, 1);
    const auto r = pgd_attack(model, params, batch, b, i);
    CHECK(linf_distance(r.x_adv, batch.x) <= b.epsilon);
    CHECK(linf_distance(r.y_adv, batch.y) <= b.epsilon);
    CHECK((r.x_adv.array() >= 0.0f).all());
    CHECK((r.y_adv.array() <= 1.0f).all());
    Tape<float> tape(params);
    const double clean = cross_entropy(model.forward(tape, tape.constant(batch.x), tape.constant(batch.y)).logits,
                                       batch.labels).value().item();
    if (r.final_loss() >= clean) ++increased;
  }
  MESSAGE("attacked loss >= clean loss on " << increased << " / 200");
  CHECK(increased >= 180);
}

TEST_CASE("a larger budget reaches a loss at least as high on most batches") {
  const auto data = generate_dataset(small_scene(8), 100);
  const Model model = small_model();
  const auto& params = trained_small_params();
  int dominated = 0;
  for (int i = 0; i < 50; ++i) {
    const auto batch = data.samples.slice(2 * i, 2);
    const auto small = pgd_attack(model, params, batch, AttackBudget::with_epsilon(2.0 / 255.0, 5));
    const auto large = pgd_attack(model, params, batch, AttackBudget::with_epsilon(8.0 / 255.0, 5));
    if (large.final_loss() >= small.final_loss()) ++dominated;
  }
  MESSAGE("larger budget dominates on " << dominated << " / 50");
  CHECK(dominated >= 40);
}

TEST_CASE("attacks are deterministic and independent of chunking") {
  const auto data = generate_dataset(small_scene(9), 10);
  const Model model = small_model();
  const auto& params = trained_small_params();
  auto b = AttackBudget::with_epsilon(4.0 / 255.0, 3, 11);
  const auto a1 = attack_dataset(model, params, data.samples, b, 4);
  const auto a2 = attack_dataset(model, params, data.samples, b, 4);
  CHECK(a1.x == a2.x);
  CHECK(a1.y == a2.y);
  CHECK(a1.labels == data.samples.labels);
  const auto a3 = attack_dataset(model, params, data.samples, b, 3);
  CHECK(max_abs_diff(a1.x, a3.x) <= 1e-6f);
  b.random_start = true;
  CHECK(attack_dataset(model, params, data.samples, b, 4).x == attack_dataset(model, params, data.samples, b, 4).x);
}

TEST_CASE("offline attack sets: three levels over twelve samples") {
  const auto data = generate_dataset(small_scene(10), 12);
  const Model source{FusionNetwork(offline_source_arch(4)), SegHead(kSceneClasses, 4)};
  const auto params = init_parameters<float>(source.parameter_specs(), 3);
  std::vector<AttackBudget> levels;
  for (double e : {0.0, 2.0 / 255.0, 4.0 / 255.0}) levels.push_back(AttackBudget::with_epsilon(e, 3));
  const auto sets = generate_offline_attack_set(source, params, data.samples, levels, 5);
  REQUIRE(sets.size() == 3);
  for (std::size_t l = 0; l < sets.size(); ++l) {
    const auto& s = sets[l];
    CHECK(s.train.level == static_cast<int>(l) + 1);
    CHECK(s.train.indices.size() == 9);
    CHECK(s.val.indices.size() == 3);
    CHECK(s.train.verify(data.samples));
    CHECK(s.val.verify(data.samples));
    CHECK(s.train.indices == sets[0].train.indices);
    std::vector<int> all = s.train.indices;
    all.insert(all.end(), s.val.indices.begin(), s.val.indices.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 12; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
  }
  const auto clean = data.samples.gather(sets[0].train.indices);
  CHECK(sets[0].train.samples.x == clean.x);
  CHECK(sets[0].train.samples.y == clean.y);

  SUBCASE("tampering breaks verification") {
    auto tampered = sets[2].train;
    tampered.samples.x[0] = tampered.samples.x[0] > 0.5f ? 0.0f : 1.0f;
    CHECK_FALSE(tampered.verify(data.samples));
  }
  SUBCASE("save and load round-trip") {
    const auto dir = std::filesystem::temp_directory_path() / "afuse_test_attacks";
    std::filesystem::remove_all(dir);
    save_attacked_dataset(dir, sets[1].val);
    std::filesystem::path manifest;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if (e.path().extension() == ".json") manifest = e.path();
    }
    const auto back = load_attacked_dataset(manifest);
    CHECK(back.samples.x == sets[1].val.samples.x);
    CHECK(back.indices == sets[1].val.indices);
    CHECK(back.budget.epsilon == sets[1].val.budget.epsilon);
    std::filesystem::remove_all(dir);
  }
  SUBCASE("a source of the wrong architecture is rejected") {
    const Model other = small_model();
    const auto p = init_parameters<float>(other.parameter_specs(), 3);
    CHECK_THROWS_AS(generate_offline_attack_set(other, p, data.samples, levels, 5), ValidationError);
  }
}

TEST_CASE("epsilon parsing and budget JSON") {
  CHECK(parse_epsilon(Json("4/255")) == 4.0 / 255.0);
  CHECK(parse_epsilon(Json(0.25)) == 0.25);
  CHECK(parse_epsilon(Json("0.5")) == 0.5);
  CHECK_THROWS_AS(parse_epsilon(Json("1/0")), ValidationError);
  CHECK_THROWS_AS(parse_epsilon(Json("4/255x")), ValidationError);
  CHECK_THROWS_AS(parse_epsilon(Json("-1")), ValidationError);
  CHECK_THROWS_AS(parse_epsilon(Json::array()), ValidationError);
  const auto b = budget_from_json(Json{{"epsilon", "8/255"}});
  CHECK(b.eta == doctest::Approx(2.0 / 255.0));
  CHECK_THROWS_AS(budget_from_json(Json{{"epsilon", 0.1}, {"radius", 1}}), ValidationError);
  const auto c = AttackBudget::with_epsilon(4.0 / 255.0, 7, 3);
  const auto back = budget_from_json(to_json(c));
  CHECK(back.epsilon == c.epsilon);
  CHECK(back.eta == c.eta);
  CHECK(back.steps == 7);
  CHECK(back.seed == 3);
}

TEST_CASE("index splits are deterministic partitions") {
  const auto [a, b] = split_indices(20, 0.25, 3);
  CHECK(a.size() == 15);
  CHECK(b.size() == 5);
  CHECK(split_indices(20, 0.25, 3).first == a);
  CHECK_THROWS_AS(split_indices(1, 0.25, 3), ValidationError);
  CHECK_THROWS_AS(split_indices(10, 1.0, 3), ValidationError);
}
