#include "afuse/config.hpp"

#include "afuse/errors.hpp"

namespace afuse {

namespace {

/// Throws on keys of `j` that `known` lacks.
void reject_unknown(const Json& j, const Json& known, const std::string& context) {
  if (!j.is_object()) throw ValidationError(context + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown key '" + key + "' in " + context);
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("bad value for '") + key + "': " + e.what());
  }
}

std::string form_name(FusionLossForm f) {
  return f == FusionLossForm::kWeightedTargets ? "weighted_targets" : "weighted_differences";
}

Json adam_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

AdamConfig adam_from_json(const Json& j, AdamConfig a) {
  reject_unknown(j, adam_json(a), "adam settings");
  read(j, "lr", a.lr);
  read(j, "beta1", a.beta1);
  read(j, "beta2", a.beta2);
  read(j, "eps", a.eps);
  read(j, "weight_decay", a.weight_decay);
  return a;
}

AttackBudget budget_or(const Json& j, const char* key, const AttackBudget& fallback) {
  return j.contains(key) ? budget_from_json(j.at(key)) : fallback;
}

std::vector<double> epsilons_from_json(const Json& j) {
  std::vector<double> out;
  if (!j.is_array()) throw ValidationError("level_epsilons must be an array");
  for (const auto& e : j) out.push_back(parse_epsilon(e));
  return out;
}

}  // namespace

Json to_json(const LossWeights& w) {
  return {{"lambda", w.lambda},
          {"w_mse", w.w_mse},
          {"w_ssim", w.w_ssim},
          {"form", form_name(w.form)},
          {"literal_ssim", w.literal_ssim}};
}

LossWeights loss_weights_from_json(const Json& j) {
  LossWeights w;
  reject_unknown(j, to_json(w), "loss settings");
  read(j, "lambda", w.lambda);
  read(j, "w_mse", w.w_mse);
  read(j, "w_ssim", w.w_ssim);
  read(j, "literal_ssim", w.literal_ssim);
  if (j.contains("form")) {
    const auto f = j.at("form").get<std::string>();
    if (f == "weighted_targets") {
      w.form = FusionLossForm::kWeightedTargets;
    } else if (f == "weighted_differences") {
      w.form = FusionLossForm::kWeightedDifferences;
    } else {
      throw ValidationError("unknown fusion loss form '" + f + "'");
    }
  }
  return w;
}

Json to_json(const JointConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"adam", adam_json(c.adam)},
          {"adv_fraction", c.adv_fraction},
          {"attack", to_json(c.attack)},
          {"loss", to_json(c.loss)},
          {"seed", c.seed}};
}

JointConfig joint_config_from_json(const Json& j, const JointConfig& base) {
  JointConfig c = base;
  reject_unknown(j, to_json(c), "joint settings");
  read(j, "steps", c.steps);
  read(j, "batch_size", c.batch_size);
  if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"), c.adam);
  read(j, "adv_fraction", c.adv_fraction);
  c.attack = budget_or(j, "attack", c.attack);
  if (j.contains("loss")) c.loss = loss_weights_from_json(j.at("loss"));
  read(j, "seed", c.seed);
  c.validate();
  return c;
}

Json to_json(const AATConfig& c) {
  return {{"level_epsilons", c.level_epsilons},
          {"level_attack_steps", c.level_attack_steps},
          {"val_fraction", c.val_fraction},
          {"attack_samples", c.attack_samples},
          {"source_steps", c.source_steps},
          {"inner_steps", c.inner_steps},
          {"inner_lr", c.inner_lr},
          {"outer_lr", c.outer_lr},
          {"outer_iterations", c.outer_iterations},
          {"converge_tol", c.converge_tol},
          {"converge_window", c.converge_window},
          {"pretext_batch", c.pretext_batch},
          {"warm_steps", c.warm_steps},
          {"warm_lr", c.warm_lr},
          {"reuse_seg_head", c.reuse_seg_head},
          {"joint", to_json(c.joint)}};
}

AATConfig aat_config_from_json(const Json& j, const AATConfig& base) {
  AATConfig c = base;
  reject_unknown(j, to_json(c), "training settings");
  if (j.contains("level_epsilons")) c.level_epsilons = epsilons_from_json(j.at("level_epsilons"));
  read(j, "level_attack_steps", c.level_attack_steps);
  read(j, "val_fraction", c.val_fraction);
  read(j, "attack_samples", c.attack_samples);
  read(j, "source_steps", c.source_steps);
  read(j, "inner_steps", c.inner_steps);
  read(j, "inner_lr", c.inner_lr);
  read(j, "outer_lr", c.outer_lr);
  read(j, "outer_iterations", c.outer_iterations);
  read(j, "converge_tol", c.converge_tol);
  read(j, "converge_window", c.converge_window);
  read(j, "pretext_batch", c.pretext_batch);
  read(j, "warm_steps", c.warm_steps);
  read(j, "warm_lr", c.warm_lr);
  read(j, "reuse_seg_head", c.reuse_seg_head);
  if (j.contains("joint")) c.joint = joint_config_from_json(j.at("joint"), c.joint);
  c.validate();
  return c;
}

Json to_json(const SearchConfig& c) {
  Json cands = Json::array();
  for (const auto& o : c.candidates) cands.push_back(o.name());
  return {{"candidates", cands},
          {"rule", c.rule.name()},
          {"base_channels", c.base_channels},
          {"classes", c.classes},
          {"warm_start_steps", c.warm_start_steps},
          {"param_steps_per_alpha_step", c.param_steps_per_alpha_step},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"adv_fraction", c.adv_fraction},
          {"attack", to_json(c.attack)},
          {"theta_opt", adam_json(c.theta_opt)},
          {"alpha_opt", {{"lr", c.alpha_opt.lr}, {"momentum", c.alpha_opt.momentum}}},
          {"loss", to_json(c.loss)},
          {"seed", c.seed}};
}

SearchConfig search_config_from_json(const Json& j, const SearchConfig& base) {
  SearchConfig c = base;
  reject_unknown(j, to_json(c), "search settings");
  if (j.contains("candidates")) {
    c.candidates.clear();
    for (const auto& o : j.at("candidates")) c.candidates.push_back(OpCode::parse(o.get<std::string>()));
  }
  if (j.contains("rule")) c.rule = FusionRule::parse(j.at("rule").get<std::string>());
  read(j, "base_channels", c.base_channels);
  read(j, "classes", c.classes);
  read(j, "warm_start_steps", c.warm_start_steps);
  read(j, "param_steps_per_alpha_step", c.param_steps_per_alpha_step);
  read(j, "iterations", c.iterations);
  read(j, "batch_size", c.batch_size);
  read(j, "adv_fraction", c.adv_fraction);
  c.attack = budget_or(j, "attack", c.attack);
  if (j.contains("theta_opt")) c.theta_opt = adam_from_json(j.at("theta_opt"), c.theta_opt);
  if (j.contains("alpha_opt")) {
    const Json& a = j.at("alpha_opt");
    reject_unknown(a, Json{{"lr", 0}, {"momentum", 0}}, "alpha optimizer settings");
    read(a, "lr", c.alpha_opt.lr);
    read(a, "momentum", c.alpha_opt.momentum);
  }
  if (j.contains("loss")) c.loss = loss_weights_from_json(j.at("loss"));
  read(j, "seed", c.seed);
  c.validate();
  return c;
}

Json to_json(const SweepConfig& c) {
  Json ops = Json::array(), rules = Json::array(), budgets = Json::array();
  for (const auto& o : c.ops) ops.push_back(o.name());
  for (const auto& r : c.rules) rules.push_back(r.name());
  for (const auto& b : c.budgets) budgets.push_back(to_json(b));
  return {{"ops", ops}, {"rules", rules}, {"budgets", budgets}, {"seeds", c.seeds}, {"steps", c.steps}};
}

SweepConfig sweep_config_from_json(const Json& j, const SweepConfig& base) {
  SweepConfig c = base;
  reject_unknown(j, to_json(c), "sweep settings");
  if (j.contains("ops")) {
    c.ops.clear();
    for (const auto& o : j.at("ops")) c.ops.push_back(OpCode::parse(o.get<std::string>()));
  }
  if (j.contains("rules")) {
    c.rules.clear();
    for (const auto& r : j.at("rules")) c.rules.push_back(FusionRule::parse(r.get<std::string>()));
  }
  if (j.contains("budgets")) {
    c.budgets.clear();
    for (const auto& b : j.at("budgets")) c.budgets.push_back(budget_from_json(b));
  }
  read(j, "seeds", c.seeds);
  read(j, "steps", c.steps);
  if (c.steps < 0) throw ValidationError("sweep steps must be >= 0");
  return c;
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.search.base_channels = c.arch.base_channels;
  c.sweep.ops = {OpCode::parse("3-C"), OpCode::parse("3-DC"), OpCode::parse("3-RB"),
                 OpCode::parse("3-DB"), OpCode::parse("SA"),   OpCode::parse("CA")};
  for (const char* r : {"MAX", "WA", "AA", "SUM", "CC", "DIRECT"}) c.sweep.rules.push_back(FusionRule::parse(r));
  c.sweep.budgets = {AttackBudget::with_epsilon(4.0 / 255.0, 5)};
  return c;
}

ExperimentConfig ExperimentConfig::reference() {
  ExperimentConfig c = defaults();
  c.scene.height = 16;
  c.scene.width = 16;
  c.arch = ArchSpec::searched_reference(8);
  c.search.base_channels = 8;
  c.data.train = 1024;
  c.aat.attack_samples = 64;
  c.aat.source_steps = 1000;
  c.aat.joint.steps = 3000;
  c.aat.joint.adam.lr = 3e-3;
  c.aat.joint.attack = AttackBudget::with_epsilon(4.0 / 255.0, 5);
  c.sweep.steps = 3000;
  return c;
}

void ExperimentConfig::validate() const {
  scene.validate();
  if (data.train < 2 || data.val < 1 || data.test < 1) throw ValidationError("dataset sizes too small");
  if (classes != kSceneClasses) throw ValidationError("the synthetic scenes have exactly 4 classes");
  if (eval_batch < 1) throw ValidationError("eval_batch must be >= 1");
  if (trend_seeds.empty()) throw ValidationError("trend_seeds must not be empty");
  search.validate();
  aat.validate();
  eval_attack.validate();
}

Json to_json(const ExperimentConfig& c) {
  return {{"schema_version", kConfigSchemaVersion},
          {"seed", c.seed},
          {"scene", c.scene.to_json()},
          {"data", {{"train", c.data.train}, {"val", c.data.val}, {"test", c.data.test}}},
          {"arch", c.arch.to_string()},
          {"classes", c.classes},
          {"search", to_json(c.search)},
          {"train", to_json(c.aat)},
          {"eval", {{"attack", to_json(c.eval_attack)}, {"batch_size", c.eval_batch}}},
          {"sweep", to_json(c.sweep)},
          {"trend_seeds", c.trend_seeds}};
}

ExperimentConfig experiment_config_from_json(const Json& j, const ExperimentConfig& base) {
  ExperimentConfig c = base;
  Json known = to_json(c);
  known["preset"] = "";
  reject_unknown(j, known, "config");
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "reference") {
      c = ExperimentConfig::reference();
    } else if (preset == "defaults") {
      c = ExperimentConfig::defaults();
    } else {
      throw ValidationError("unknown preset '" + preset + "' (expected defaults or reference)");
    }
  }
  if (j.contains("schema_version") && j.at("schema_version") != kConfigSchemaVersion) {
    throw ValidationError("config schema_version " + j.at("schema_version").dump() + " is not supported (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
  }
  read(j, "seed", c.seed);
  if (j.contains("scene")) {
    Json merged = c.scene.to_json();
    reject_unknown(j.at("scene"), merged, "scene settings");
    merged.update(j.at("scene"));
    c.scene = SceneSpec::from_json(merged);
  }
  if (j.contains("data")) {
    const Json& d = j.at("data");
    reject_unknown(d, Json{{"train", 0}, {"val", 0}, {"test", 0}}, "data settings");
    read(d, "train", c.data.train);
    read(d, "val", c.data.val);
    read(d, "test", c.data.test);
  }
  if (j.contains("arch")) c.arch = ArchSpec::parse(j.at("arch").get<std::string>());
  read(j, "classes", c.classes);
  if (j.contains("search")) c.search = search_config_from_json(j.at("search"), c.search);
  if (j.contains("train")) c.aat = aat_config_from_json(j.at("train"), c.aat);
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    reject_unknown(e, Json{{"attack", 0}, {"batch_size", 0}}, "eval settings");
    c.eval_attack = budget_or(e, "attack", c.eval_attack);
    read(e, "batch_size", c.eval_batch);
  }
  if (j.contains("sweep")) c.sweep = sweep_config_from_json(j.at("sweep"), c.sweep);
  read(j, "trend_seeds", c.trend_seeds);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return experiment_config_from_json(read_json(path)); }

ExperimentData make_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.train = generate_dataset(cfg.scene, cfg.data.train, 0);
  d.val = generate_dataset(cfg.scene, cfg.data.val, cfg.data.train);
  d.test = generate_dataset(cfg.scene, cfg.data.test, cfg.data.train + cfg.data.val);
  return d;
}

}  // namespace afuse
