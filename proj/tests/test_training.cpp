#include <doctest.h>

#include <filesystem>
#include <set>

#include "afuse/checkpoint.hpp"
#include "afuse/errors.hpp"
#include "fixtures.hpp"

using namespace afuse;
using namespace afuse::testing;

namespace {

AATConfig tiny_aat() {
  AATConfig c;
  c.attack_samples = 8;
  c.source_steps = 3;
  c.inner_steps = 2;
  c.outer_iterations = 2;
  c.warm_steps = 3;
  c.pretext_batch = 2;
  c.level_attack_steps = 2;
  c.joint = small_joint(4);
  c.joint.batch_size = 2;
  c.joint.attack = AttackBudget::with_epsilon(4.0 / 255.0, 2);
  return c;
}

std::vector<AttackLevelSet> tiny_levels(const SampleBatch& data) {
  const Model source{FusionNetwork(offline_source_arch(4)), SegHead(kSceneClasses, 4)};
  const auto params = init_parameters<float>(source.parameter_specs(), 2);
  std::vector<AttackBudget> levels;
  for (double e : {1.0 / 255.0, 4.0 / 255.0}) levels.push_back(AttackBudget::with_epsilon(e, 2));
  return generate_offline_attack_set(source, params, data, levels, 3);
}

double mean_fusion(const FusionNetwork& fusion, const ParameterStore<float>& p, const SampleBatch& b) {
  Tape<float> tape(p);
  return fusion_objective(tape, fusion, b, LossWeights{}).value().item();
}

}  // namespace

TEST_CASE("batch stream visits every index once per epoch, deterministically") {
  BatchStream a(10, 3, 5), b(10, 3, 5);
  std::multiset<int> seen;
  for (int i = 0; i < 3; ++i) {
    const auto batch = a.next();
    CHECK(batch == b.next());
    CHECK(batch.size() == 3);
    seen.insert(batch.begin(), batch.end());
  }
  CHECK(seen.size() == 9);
  CHECK(std::set<int>(seen.begin(), seen.end()).size() == 9);
}

TEST_CASE("adapt works on a copy and inner_steps = 0 is the identity") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(), 8);
  const auto all = init_parameters<float>(model.parameter_specs(), 1);
  const auto theta = all.subset("fusion/");
  const auto snapshot = theta;
  AATConfig cfg = tiny_aat();
  cfg.inner_lr = 1e-2;
  const auto adapted = adapt(model.fusion, theta, data.samples, cfg, 4);
  CHECK(theta == snapshot);
  CHECK_FALSE(adapted == theta);
  CHECK(adapted == adapt(model.fusion, theta, data.samples, cfg, 4));
  cfg.inner_steps = 0;
  CHECK(adapt(model.fusion, theta, data.samples, cfg, 4) == theta);
}

TEST_CASE("warm start with zero steps returns its input") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(), 8);
  const auto theta = init_parameters<float>(model.parameter_specs(), 1).subset("fusion/");
  AATConfig cfg = tiny_aat();
  cfg.warm_steps = 0;
  const auto r = warm_start_fusion(model.fusion, theta, tiny_levels(data.samples), cfg);
  CHECK(r.params == theta);
  CHECK(r.curve.empty());
}

TEST_CASE("full-batch warm start decreases the fusion loss on most steps") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(3), 16);
  const auto theta = init_parameters<float>(model.parameter_specs(), 6).subset("fusion/");
  AATConfig cfg = tiny_aat();
  cfg.warm_steps = 30;
  const auto r = warm_start_fusion(model.fusion, theta, tiny_levels(data.samples), cfg);
  REQUIRE(r.curve.size() == 30);
  int non_increasing = 0;
  for (std::size_t i = 1; i < r.curve.size(); ++i) non_increasing += r.curve[i] <= r.curve[i - 1] ? 1 : 0;
  MESSAGE("non-increasing on " << non_increasing << " / 29 steps");
  CHECK(non_increasing >= 27);
}

TEST_CASE("pretext initialization returns fusion parameters and per-level adaptation gains") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(4), 16);
  const auto params0 = init_parameters<float>(model.parameter_specs(), 7);
  const auto levels = tiny_levels(data.samples);
  const AATConfig cfg = tiny_aat();
  const auto r = pretext_initialize(model.fusion, params0, levels, cfg, 9);
  CHECK(r.iterations == cfg.outer_iterations);
  CHECK(r.outer_curve.size() == static_cast<std::size_t>(cfg.outer_iterations));
  CHECK(r.levels.size() == levels.size());
  CHECK_NOTHROW(check_parameters(model.fusion.parameter_specs(), r.theta, "test"));
  for (const auto& [name, t] : r.theta) CHECK(name.starts_with("fusion/"));
  CHECK_THROWS_AS(pretext_initialize(model.fusion, params0, {}, cfg, 9), ValidationError);
  const auto again = pretext_initialize(model.fusion, params0, levels, cfg, 9);
  CHECK(again.theta == r.theta);
}

TEST_CASE("lambda = 0 removes the attacked term") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(5), 4);
  const auto params = init_parameters<float>(model.parameter_specs(), 8);
  const auto clean = data.samples.slice(0, 2), attacked = data.samples.slice(2, 2);
  LossWeights w;
  w.lambda = 0.0;
  Tape<float> t1(params), t2(params);
  const double with = training_objective(t1, model, clean, attacked, w).value().item();
  const double without = training_objective(t2, model, clean, SampleBatch{}, w).value().item();
  CHECK(with == doctest::Approx(without).epsilon(1e-7));
  const auto h = hybrid_losses(model, params, clean, attacked, attacked, LossWeights{});
  CHECK(h.objective == doctest::Approx(h.l_tr + h.l_tr_at).epsilon(1e-7));
  CHECK(h.l_val == doctest::Approx(h.l_tr_at).epsilon(1e-7));
}

TEST_CASE("cascade loss is the even mix of fusion and task losses") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(5), 2);
  const auto params = init_parameters<float>(model.parameter_specs(), 8);
  Tape<float> tape(params);
  const auto t = cascade_losses(tape, model, data.samples, LossWeights{});
  CHECK(t.combined.value().item() ==
        doctest::Approx(0.5 * t.fusion.value().item() + 0.5 * t.task.value().item()).epsilon(1e-6));
  CHECK(mean_fusion(model.fusion, params, data.samples) == doctest::Approx(t.fusion.value().item()));
}

TEST_CASE("every strategy is deterministic given its seed") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(6), 16);
  const AATConfig cfg = tiny_aat();
  for (auto s : {Strategy::kNormal, Strategy::kSat, Strategy::kAat}) {
    INFO(to_string(s));
    const auto a = train_strategy(s, model, data.samples, cfg, 11);
    const auto b = train_strategy(s, model, data.samples, cfg, 11);
    CHECK(a.params == b.params);
    CHECK(a.params.all_finite());
    CHECK(a.curves.at("joint").size() == static_cast<std::size_t>(cfg.joint.steps));
    if (s == Strategy::kAat) {
      for (const char* phase : {"source", "pretext", "warm_start", "final"}) CHECK(a.checkpoints.contains(phase));
      CHECK(a.provenance.at("attacked_datasets").size() == cfg.level_epsilons.size());
    }
  }
}

TEST_CASE("reusing the source segmentation head changes only the starting task weights") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(7), 16);
  AATConfig cfg = tiny_aat();
  cfg.joint.steps = 0;
  const auto fresh = train_strategy(Strategy::kAat, model, data.samples, cfg, 12);
  cfg.reuse_seg_head = true;
  const auto reused = train_strategy(Strategy::kAat, model, data.samples, cfg, 12);
  CHECK(reused.params.subset("fusion/") == fresh.params.subset("fusion/"));
  CHECK(reused.params.subset("seg/") == reused.checkpoints.at("source").subset("seg/"));
}

TEST_CASE("training runs survive save, load and save byte for byte") {
  const Model model = small_model();
  const auto data = generate_dataset(small_scene(8), 16);
  const auto run = train_strategy(Strategy::kAat, model, data.samples, tiny_aat(), 13);
  const auto root = std::filesystem::temp_directory_path() / "afuse_test_training";
  std::filesystem::remove_all(root);
  const Json config = {{"note", "test"}};
  run.save(root / "a", config);
  const auto back = TrainingRun::load(root / "a");
  CHECK(back.params == run.params);
  CHECK(back.strategy == Strategy::kAat);
  back.save(root / "b", config);
  for (const auto& e : std::filesystem::directory_iterator(root / "a")) {
    INFO(e.path().filename());
    CHECK(read_file(e.path()) == read_file(root / "b" / e.path().filename()));
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("strategy names and config validation") {
  CHECK(strategy_from_string("sat") == Strategy::kSat);
  CHECK(to_string(Strategy::kAat) == "aat");
  CHECK_THROWS_AS(strategy_from_string("bogus"), ValidationError);
  AATConfig c = tiny_aat();
  c.inner_steps = -1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny_aat();
  c.level_epsilons.clear();
  CHECK_THROWS_AS(c.validate(), ValidationError);
  JointConfig j = small_joint(1);
  j.adv_fraction = 1.5;
  CHECK_THROWS_AS(j.validate(), ValidationError);
}
