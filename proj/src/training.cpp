#include "afuse/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

namespace {

constexpr int kEvalChunk = 16;

/// Mean L_F over `data`, evaluated in chunks.
double mean_fusion_loss(const FusionNetwork& fusion, const ParameterStore<float>& params, const SampleBatch& data,
                        const LossWeights& w) {
  double total = 0.0;
  for (int start = 0; start < data.size(); start += kEvalChunk) {
    const int count = std::min(kEvalChunk, data.size() - start);
    Tape<float> tape(params);
    total += count * static_cast<double>(fusion_objective(tape, fusion, data.slice(start, count), w).value().item());
  }
  return total / data.size();
}

SampleBatch pooled_train(const std::vector<AttackLevelSet>& attacked) {
  SampleBatch pooled;
  for (const auto& level : attacked) pooled = SampleBatch::join(pooled, level.train.samples);
  return pooled;
}

}  // namespace

BatchStream::BatchStream(int n, int batch_size, std::uint64_t seed) : n_(n), batch_(batch_size), seed_(seed) {
  if (n <= 0 || batch_size <= 0) throw ValidationError("batch stream needs positive sizes");
  order_.resize(static_cast<std::size_t>(n));
  reshuffle();
}

void BatchStream::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(derive_seed(seed_, epoch_++));
  for (int i = n_ - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(order_[static_cast<std::size_t>(i)], order_[static_cast<std::size_t>(pick(rng))]);
  }
  cursor_ = 0;
}

std::vector<int> BatchStream::next() {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch_));
  while (static_cast<int>(out.size()) < batch_) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

void accumulate(Gradients<float>& acc, const Gradients<float>& g, float scale) {
  for (const auto& [name, t] : g) {
    auto it = acc.find(name);
    if (it == acc.end()) {
      acc.emplace(name, Tensor<float>(t.shape(), (scale * t.array()).eval()));
    } else {
      it->second.array() += scale * t.array();
    }
  }
}

void JointConfig::validate() const {
  if (steps < 0) throw ValidationError("joint steps must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(adam.lr > 0)) throw ValidationError("learning rates must be positive");
  if (adv_fraction < 0 || adv_fraction > 1) throw ValidationError("adv_fraction must lie in [0,1]");
  attack.validate();
}

PhaseResult joint_adversarial_train(const Model& model, ParameterStore<float> params, const SampleBatch& train,
                                    const JointConfig& cfg) {
  cfg.validate();
  check_parameters(model.parameter_specs(), params, "joint training");
  BatchStream stream(train.size(), cfg.batch_size, derive_seed(cfg.seed, fnv1a("joint")));
  const int n_adv = static_cast<int>(std::lround(cfg.adv_fraction * cfg.batch_size));
  Adam<float> opt(cfg.adam);
  PhaseResult out;
  for (int step = 0; step < cfg.steps; ++step) {
    const SampleBatch batch = train.gather(stream.next());
    SampleBatch clean = n_adv < batch.size() ? batch.slice(0, batch.size() - n_adv) : SampleBatch{};
    SampleBatch attacked;
    if (n_adv > 0) {
      attacked = batch.slice(batch.size() - n_adv, n_adv);
      AttackBudget b = cfg.attack;
      b.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(step));
      AttackResult r = pgd_attack(model, params, attacked, b);
      attacked.x = std::move(r.x_adv);
      attacked.y = std::move(r.y_adv);
    }
    Tape<float> tape(params);
    auto loss = training_objective(tape, model, clean, attacked, cfg.loss);
    const double value = loss.value().item();
    out.curve.push_back(value);
    if (!std::isfinite(value)) throw DivergenceError("joint training", out.curve);
    opt.step(params, tape.backward(loss));
  }
  out.params = std::move(params);
  return out;
}

PhaseResult standard_adversarial_train(const Model& model, const SampleBatch& train, const JointConfig& cfg,
                                       std::uint64_t init_seed) {
  return joint_adversarial_train(model, init_parameters<float>(model.parameter_specs(), init_seed), train, cfg);
}

PhaseResult normal_train(const Model& model, const SampleBatch& train, JointConfig cfg, std::uint64_t init_seed) {
  cfg.adv_fraction = 0.0;
  return standard_adversarial_train(model, train, cfg, init_seed);
}

void AATConfig::validate() const {
  if (level_epsilons.empty()) throw ValidationError("AAT needs at least one attack level");
  for (double e : level_epsilons) {
    if (!(e >= 0)) throw ValidationError("attack level epsilons must be >= 0");
  }
  if (inner_steps < 0 || outer_iterations < 0 || warm_steps < 0 || source_steps < 0 || level_attack_steps < 0) {
    throw ValidationError("AAT step counts must be >= 0");
  }
  if (!(inner_lr > 0 && outer_lr > 0 && warm_lr > 0)) throw ValidationError("learning rates must be positive");
  if (attack_samples < 2) throw ValidationError("attack_samples must be >= 2");
  if (converge_window < 1 || pretext_batch < 1) throw ValidationError("converge_window and pretext_batch must be >= 1");
  joint.validate();
}

ParameterStore<float> adapt(const FusionNetwork& fusion, const ParameterStore<float>& theta, const SampleBatch& data,
                            const AATConfig& cfg, std::uint64_t stream_seed) {
  ParameterStore<float> th = theta;
  if (cfg.inner_steps == 0) return th;
  BatchStream stream(data.size(), cfg.pretext_batch, stream_seed);
  Sgd<float> sgd({cfg.inner_lr, 0.0});
  for (int k = 0; k < cfg.inner_steps; ++k) {
    Tape<float> tape(th);
    auto loss = fusion_objective(tape, fusion, data.gather(stream.next()), cfg.joint.loss);
    if (!std::isfinite(loss.value().item())) throw NumericalError("pretext inner step: non-finite fusion loss");
    sgd.step(th, tape.backward(loss));
  }
  return th;
}

PretextResult pretext_initialize(const FusionNetwork& fusion, const ParameterStore<float>& theta0,
                                 const std::vector<AttackLevelSet>& attacked, const AATConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (attacked.empty()) throw ValidationError("pretext initialization needs at least one attack level");
  for (std::size_t i = 0; i < attacked.size(); ++i) {
    if (attacked[i].train.samples.size() == 0 || attacked[i].val.samples.size() == 0) {
      throw ValidationError("attack level " + std::to_string(i + 1) + " lacks train or validation data");
    }
  }
  PretextResult out;
  out.theta = theta0.subset(fusion.prefix() + "/");
  check_parameters(fusion.parameter_specs(), out.theta, "pretext initialization");

  std::vector<BatchStream> val_streams;
  for (std::size_t i = 0; i < attacked.size(); ++i) {
    val_streams.emplace_back(attacked[i].val.samples.size(), cfg.pretext_batch, derive_seed(seed, 1000 + i));
  }
  Adam<float> outer({cfg.outer_lr});
  for (int it = 0; it < cfg.outer_iterations; ++it) {
    Gradients<float> total;
    double outer_loss = 0.0;
    // Levels reduce in fixed order.
    for (std::size_t i = 0; i < attacked.size(); ++i) {
      const auto stream_seed = derive_seed(seed, static_cast<std::uint64_t>(it) * 1024 + i);
      const ParameterStore<float> th_i = adapt(fusion, out.theta, attacked[i].train.samples, cfg, stream_seed);
      Tape<float> tape(th_i);
      auto loss = fusion_objective(tape, fusion, attacked[i].val.samples.gather(val_streams[i].next()), cfg.joint.loss);
      outer_loss += loss.value().item();
      accumulate(total, tape.backward(loss));
    }
    out.outer_curve.push_back(outer_loss);
    if (!std::isfinite(outer_loss)) throw DivergenceError("pretext initialization", out.outer_curve);
    outer.step(out.theta, total);
    ++out.iterations;
    const std::size_t t = out.outer_curve.size() - 1;
    const auto w = static_cast<std::size_t>(cfg.converge_window);
    if (t >= w) {
      const double prev = out.outer_curve[t - w];
      if (std::abs(out.outer_curve[t] - prev) / std::max(std::abs(prev), 1e-12) < cfg.converge_tol) break;
    }
  }

  for (std::size_t i = 0; i < attacked.size(); ++i) {
    LevelAdaptation la;
    la.pre = mean_fusion_loss(fusion, out.theta, attacked[i].val.samples, cfg.joint.loss);
    const auto adapted = adapt(fusion, out.theta, attacked[i].train.samples, cfg, derive_seed(seed, 2000 + i));
    la.post = mean_fusion_loss(fusion, adapted, attacked[i].val.samples, cfg.joint.loss);
    out.levels.push_back(la);
  }
  return out;
}

PhaseResult warm_start_fusion(const FusionNetwork& fusion, const ParameterStore<float>& theta,
                              const std::vector<AttackLevelSet>& attacked, const AATConfig& cfg) {
  PhaseResult out;
  out.params = theta;
  if (cfg.warm_steps == 0) return out;
  const SampleBatch pooled = pooled_train(attacked);
  if (pooled.size() == 0) throw ValidationError("warm start needs attacked training data");
  Adam<float> opt({cfg.warm_lr});
  for (int step = 0; step < cfg.warm_steps; ++step) {
    Gradients<float> full;
    double loss = 0.0;
    for (int start = 0; start < pooled.size(); start += kEvalChunk) {
      const int count = std::min(kEvalChunk, pooled.size() - start);
      const float weight = static_cast<float>(count) / static_cast<float>(pooled.size());
      Tape<float> tape(out.params);
      auto l = fusion_objective(tape, fusion, pooled.slice(start, count), cfg.joint.loss);
      loss += weight * static_cast<double>(l.value().item());
      accumulate(full, tape.backward(l), weight);
    }
    out.curve.push_back(loss);
    if (!std::isfinite(loss)) throw DivergenceError("warm start", out.curve);
    opt.step(out.params, full);
  }
  return out;
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kNormal:
      return "normal";
    case Strategy::kSat:
      return "sat";
    case Strategy::kAat:
      return "aat";
  }
  return "?";
}

Strategy strategy_from_string(std::string_view text) {
  if (text == "normal") return Strategy::kNormal;
  if (text == "sat") return Strategy::kSat;
  if (text == "aat") return Strategy::kAat;
  throw ValidationError("unknown strategy '" + std::string(text) + "' (expected normal, sat or aat)");
}

OfflineAttacks prepare_offline_attacks(const Model& model, const SampleBatch& train, const AATConfig& cfg,
                                       std::uint64_t init_seed) {
  cfg.validate();
  const int C = model.fusion.base_channels();
  const Model source{FusionNetwork(offline_source_arch(C)), SegHead(model.seg.classes(), model.seg.channels())};
  JointConfig sc = cfg.joint;
  sc.steps = cfg.source_steps;
  sc.seed = derive_seed(cfg.joint.seed, fnv1a("source"));
  auto src = standard_adversarial_train(source, train, sc, derive_seed(init_seed, fnv1a("source")));

  OfflineAttacks out;
  out.source_params = std::move(src.params);
  out.source_curve = std::move(src.curve);
  std::vector<AttackBudget> levels;
  for (double e : cfg.level_epsilons) levels.push_back(AttackBudget::with_epsilon(e, cfg.level_attack_steps));
  // A fixed random subset of the training pairs is attacked.
  BatchStream pick(train.size(), std::min(cfg.attack_samples, train.size()), derive_seed(init_seed, fnv1a("pool")));
  out.pool = pick.next();
  std::sort(out.pool.begin(), out.pool.end());
  out.sets = generate_offline_attack_set(source, out.source_params, train.gather(out.pool), levels,
                                         derive_seed(init_seed, fnv1a("split")), cfg.val_fraction);
  return out;
}

Json describe(const std::vector<AttackLevelSet>& sets) {
  Json out = Json::array();
  for (const auto& l : sets) {
    out.push_back({{"level", l.train.level},
                   {"budget", to_json(l.train.budget)},
                   {"source", l.train.provenance},
                   {"train_hash", content_hash(l.train.samples)},
                   {"val_hash", content_hash(l.val.samples)}});
  }
  return out;
}

TrainingRun train_strategy(Strategy strategy, const Model& model, const SampleBatch& train, const AATConfig& cfg,
                           std::uint64_t init_seed) {
  cfg.validate();
  TrainingRun run;
  run.strategy = strategy;
  const ParameterStore<float> params0 = init_parameters<float>(model.parameter_specs(), init_seed);
  run.provenance["init_seed"] = init_seed;
  run.provenance["train_hash"] = content_hash(train);

  if (strategy == Strategy::kNormal) {
    JointConfig jc = cfg.joint;
    jc.adv_fraction = 0.0;
    auto r = joint_adversarial_train(model, params0, train, jc);
    run.curves["joint"] = std::move(r.curve);
    run.params = std::move(r.params);
  } else if (strategy == Strategy::kSat) {
    auto r = joint_adversarial_train(model, params0, train, cfg.joint);
    run.curves["joint"] = std::move(r.curve);
    run.params = std::move(r.params);
  } else {
    auto offline = prepare_offline_attacks(model, train, cfg, init_seed);
    run.curves["source"] = std::move(offline.source_curve);
    run.checkpoints["source"] = offline.source_params;
    run.provenance["attack_pool"] = offline.pool;
    run.provenance["attacked_datasets"] = describe(offline.sets);
    const auto& attacked = offline.sets;

    auto pre = pretext_initialize(model.fusion, params0, attacked, cfg, derive_seed(init_seed, fnv1a("pretext")));
    run.curves["pretext"] = pre.outer_curve;
    Json adapt_json = Json::array();
    for (const auto& la : pre.levels) adapt_json.push_back({{"pre", la.pre}, {"post", la.post}});
    run.provenance["pretext_levels"] = adapt_json;
    run.provenance["pretext_iterations"] = pre.iterations;
    run.checkpoints["pretext"] = pre.theta;

    auto warm = warm_start_fusion(model.fusion, pre.theta, attacked, cfg);
    run.curves["warm_start"] = std::move(warm.curve);
    run.checkpoints["warm_start"] = warm.params;

    ParameterStore<float> start = params0;
    start.merge(warm.params);
    if (cfg.reuse_seg_head) start.merge(offline.source_params.subset(kSegPrefix));
    auto r = joint_adversarial_train(model, std::move(start), train, cfg.joint);
    run.curves["joint"] = std::move(r.curve);
    run.params = std::move(r.params);
  }
  run.checkpoints["final"] = run.params;
  return run;
}

void TrainingRun::save(const std::filesystem::path& dir, const Json& config) const {
  std::filesystem::create_directories(dir);
  Json files = Json::object();
  for (const auto& [phase, params] : checkpoints) {
    const std::string file = phase + ".ckpt";
    save_checkpoint(dir / file, to_checkpoint(params, {{"phase", phase}, {"strategy", to_string(strategy)}}));
    files[phase] = {{"file", file}, {"hash", content_hash(params)}};
  }
  Json manifest = {{"kind", "training_run"},
                   {"strategy", to_string(strategy)},
                   {"config", config},
                   {"curves", curves},
                   {"provenance", provenance},
                   {"checkpoints", files}};
  write_json(dir / "manifest.json", manifest);
}

TrainingRun TrainingRun::load(const std::filesystem::path& dir) {
  const Json m = read_json(dir / "manifest.json");
  if (m.value("kind", "") != "training_run") throw ValidationError("'" + dir.string() + "' is not a training run");
  TrainingRun run;
  run.strategy = strategy_from_string(m.at("strategy").get<std::string>());
  run.curves = m.at("curves").get<std::map<std::string, std::vector<double>>>();
  run.provenance = m.at("provenance");
  for (const auto& [phase, entry] : m.at("checkpoints").items()) {
    auto params = to_store(load_checkpoint(dir / entry.at("file").get<std::string>()));
    if (content_hash(params) != entry.at("hash").get<std::string>()) {
      throw ValidationError("checkpoint '" + phase + "' does not match its manifest hash");
    }
    run.checkpoints.emplace(phase, std::move(params));
  }
  if (!run.checkpoints.contains("final")) throw ValidationError("training run lacks a final checkpoint");
  run.params = run.checkpoints.at("final");
  return run;
}

}  // namespace afuse
