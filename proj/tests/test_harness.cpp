#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "afuse/checkpoint.hpp"
#include "afuse/config.hpp"
#include "afuse/errors.hpp"
#include "afuse/evaluate.hpp"
#include "afuse/experiment.hpp"
#include "afuse/seg_task.hpp"
#include "afuse/sweep.hpp"
#include "fixtures.hpp"

using namespace afuse;
using namespace afuse::testing;

namespace {

ExperimentConfig tiny_config() { return load_config(std::filesystem::path(AFUSE_TEST_DATA) / "tiny_config.json"); }

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("afuse_test_harness_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("synthetic scenes: shapes, ranges, labels and determinism") {
  const SceneSpec spec = small_scene(3);
  const auto a = generate_dataset(spec, 12);
  CHECK(a.samples.x.shape() == Shape{12, 1, 16, 16});
  CHECK(a.samples.labels.size() == 12u * 16 * 16);
  CHECK((a.samples.x.array() >= 0.0f).all());
  CHECK((a.samples.y.array() <= 1.0f).all());
  for (int l : a.samples.labels) CHECK((l >= 0 && l < kSceneClasses));
  const auto b = generate_dataset(spec, 12);
  CHECK(a.samples.x == b.samples.x);
  CHECK(a.samples.labels == b.samples.labels);
  // sample i depends only on (spec, i)
  const auto tail = generate_dataset(spec, 4, 8);
  CHECK(tail.samples.x == a.samples.slice(8, 4).x);
  CHECK_FALSE(generate_dataset(small_scene(4), 12).samples.x == a.samples.x);
}

TEST_CASE("every class appears in a modest dataset") {
  const auto d = generate_dataset(small_scene(), 32);
  std::vector<int> counts(kSceneClasses, 0);
  for (int l : d.samples.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) CHECK(c > 0);
}

TEST_CASE("the constructive oracle is exact at zero noise") {
  SceneSpec spec = small_scene(5);
  spec.noise = 0.0;
  const auto d = generate_dataset(spec, 24);
  CHECK(miou(oracle_classifier(d), d.samples.labels, kSceneClasses).mean == 1.0);
}

TEST_CASE("an infrared-only classifier cannot separate the classes") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto d = generate_dataset(small_scene(seed), 32);
    const double m = miou(ir_only_classifier(d.samples), d.samples.labels, kSceneClasses).mean;
    CHECK(m <= 0.75);
  }
}

TEST_CASE("invalid scene specs are rejected") {
  SceneSpec s;
  s.height = 0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = SceneSpec{};
  s.amplitude_min = 0.2;
  s.amplitude_max = 0.1;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  CHECK_THROWS_AS(SceneSpec::from_json(Json{{"hieght", 8}}), ValidationError);
}

TEST_CASE("checkpoints round-trip and detect corruption") {
  const Model model = small_model();
  const auto params = init_parameters<float>(model.parameter_specs(), 3);
  const auto bytes = encode_checkpoint(to_checkpoint(params, {{"note", "x"}}));
  const auto back = decode_checkpoint(bytes);
  CHECK(to_store(back) == params);
  CHECK(back.meta.at("note") == "x");
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(content_hash(to_store(back)) == content_hash(params));

  std::string flipped = bytes;
  flipped[flipped.size() - 3] = static_cast<char>(flipped[flipped.size() - 3] ^ 0x10);
  CHECK_THROWS_AS(decode_checkpoint(flipped), ValidationError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 4)), ValidationError);
  CHECK_THROWS_AS(decode_checkpoint("garbage"), ValidationError);

  const auto dir = scratch("ckpt");
  save_checkpoint(dir / "p.ckpt", to_checkpoint(params));
  CHECK(to_store(load_checkpoint(dir / "p.ckpt")) == params);
  std::filesystem::remove_all(dir);
}

TEST_CASE("crc32 matches the standard check value") {
  const std::string text = "123456789";
  CHECK(crc32_of(std::span<const char>(text.data(), text.size())) == 0xCBF43926u);
}

TEST_CASE("parameter checks reject missing, extra and misshapen entries") {
  const Model model = small_model();
  const auto spec = model.parameter_specs();
  auto params = init_parameters<float>(spec, 3);
  CHECK_NOTHROW(check_parameters(spec, params, "t"));
  auto extra = params;
  extra.set("fusion/unexpected", Tensor<float>({1}));
  CHECK_THROWS_AS(check_parameters(spec, extra, "t"), ValidationError);
  auto bent = params;
  bent.set("fusion/head/b", Tensor<float>({2}));
  CHECK_THROWS_AS(check_parameters(spec, bent, "t"), ValidationError);
  CHECK_THROWS_AS(check_parameters(spec, params.subset("seg/"), "t"), ValidationError);
}

TEST_CASE("sample batches round-trip through checkpoints") {
  const auto d = generate_dataset(small_scene(), 3);
  const auto back = to_batch(decode_checkpoint(encode_checkpoint(to_checkpoint(d.samples))));
  CHECK(back.x == d.samples.x);
  CHECK(back.y == d.samples.y);
  CHECK(back.labels == d.samples.labels);
  CHECK(content_hash(back) == content_hash(d.samples));
}

TEST_CASE("configs: presets, overrides and unknown keys") {
  const auto cfg = tiny_config();
  CHECK(cfg.data.train == 16);
  CHECK(cfg.aat.joint.steps == 10);
  CHECK(cfg.arch == ExperimentConfig::reference().arch);
  const auto again = experiment_config_from_json(to_json(cfg));
  CHECK(to_json(again) == to_json(cfg));
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"dataa", Json::object()}}), ValidationError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"train", {{"inner_stepz", 1}}}}), ValidationError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"preset", "huge"}}), ValidationError);
  CHECK_THROWS_AS(experiment_config_from_json(Json{{"schema_version", 99}}), ValidationError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ValidationError);
  CHECK_NOTHROW(ExperimentConfig::defaults().validate());
  CHECK_NOTHROW(ExperimentConfig::reference().validate());
}

TEST_CASE("train, val and test draw disjoint samples") {
  const auto data = make_data(tiny_config());
  CHECK(data.train.samples.size() == 16);
  CHECK(data.val.samples.size() == 8);
  CHECK(data.test.samples.size() == 8);
  CHECK_FALSE(data.train.samples.slice(0, 1).x == data.val.samples.slice(0, 1).x);
  const auto h = dataset_hashes(data);
  CHECK(h.at("train") != h.at("test"));
}

TEST_CASE("evaluation at epsilon zero equals clean evaluation") {
  const Model model = small_model();
  const auto d = generate_dataset(small_scene(2), 10);
  const auto& params = trained_small_params();
  const auto clean = evaluate(model, params, d.samples, std::nullopt, 4);
  const auto zero = evaluate(model, params, d.samples, AttackBudget::with_epsilon(0.0, 5), 4);
  CHECK(clean.miou == zero.miou);
  CHECK(clean.loss == zero.loss);
  CHECK(evaluate(model, params, d.samples, std::nullopt, 3).miou == clean.miou);
  const auto attacked = evaluate(model, params, d.samples, AttackBudget::with_epsilon(8.0 / 255.0, 5), 4);
  CHECK(attacked.loss >= clean.loss);
}

TEST_CASE("robustness sweep is independent of the thread count and records failures") {
  auto cfg = tiny_config();
  cfg.arch.base_channels = 4;
  cfg.sweep.ops = {OpCode::parse("3-C")};
  cfg.sweep.rules = {FusionRule::parse("SUM"), FusionRule::parse("MAX")};
  cfg.sweep.budgets = {AttackBudget::with_epsilon(2.0 / 255.0, 2)};
  cfg.sweep.steps = 3;
  cfg.sweep.seeds = {0, 1};
  const auto d = generate_dataset(small_scene(), 12);
  const auto train = d.samples.slice(0, 8), test = d.samples.slice(8, 4);
  const auto one = run_robustness_sweep(cfg, train, test, 1);
  const auto three = run_robustness_sweep(cfg, train, test, 3);
  CHECK(to_json(one) == to_json(three));
  CHECK(one.rows.size() == 6);
  CHECK(one.variants().size() == 3);
  for (const auto& r : one.rows) CHECK(r.error.empty());
  CHECK_FALSE(std::isnan(one.median_miou("rule:SUM", 0)));
  CHECK(std::isnan(one.median_miou("rule:AA", 0)));
  const auto csv = sweep_csv(one);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 6 * 2);
}

TEST_CASE("manifests replay to identical metrics") {
  const auto cfg = tiny_config();
  for (const std::string kind : {"gen-data", "analyze"}) {
    INFO(kind);
    ExperimentRequest req{kind, cfg, kind == "gen-data" ? Json{{"n", 6}} : Json::object()};
    const auto dir = scratch(kind);
    const Json manifest = run_experiment(req, {dir, 1});
    CHECK(manifest.at("kind") == "experiment_manifest");
    CHECK(manifest.at("schema_version") == kManifestSchemaVersion);
    CHECK(std::filesystem::exists(dir / (kind + ".manifest.json")));
    const auto r = replay(read_json(dir / (kind + ".manifest.json")));
    CHECK(r.identical);
    Json tampered = manifest;
    tampered["schema_version"] = 99;
    CHECK_THROWS_AS(request_from_manifest(tampered), ValidationError);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("report merging emits one header and rejects foreign schemas") {
  const auto cfg = tiny_config();
  const Json m = run_experiment({"gen-data", cfg, Json{{"n", 4}}});
  const auto csv = merge_reports({m, m});
  CHECK(csv.starts_with("schema_version,experiment,variant,epsilon,steps"));
  Json bad = m;
  bad["schema_version"] = 2;
  CHECK_THROWS_AS(merge_reports({m, bad}), ValidationError);
}

TEST_CASE("unknown experiment kinds are rejected") {
  CHECK_THROWS_AS(run_experiment({"bake", tiny_config(), Json::object()}), ValidationError);
}
