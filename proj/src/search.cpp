#include "afuse/search.hpp"

#include <cmath>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"
#include "afuse/training.hpp"

namespace afuse {

namespace {

bool is_alpha(const std::string& name) { return name == kAlphaName; }

Json matrix_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

void SearchConfig::validate() const {
  if (candidates.empty()) throw ValidationError("search needs at least one candidate operation");
  if (base_channels < 1 || classes < 2) throw ValidationError("search: bad channel or class count");
  if (warm_start_steps < 0 || param_steps_per_alpha_step < 1 || iterations < 0 || batch_size < 1) {
    throw ValidationError("search step counts must be positive");
  }
  if (adv_fraction < 0 || adv_fraction > 1) throw ValidationError("adv_fraction must lie in [0,1]");
  if (!(theta_opt.lr > 0 && alpha_opt.lr > 0)) throw ValidationError("learning rates must be positive");
  attack.validate();
}

Model search_model(const SearchConfig& cfg) {
  return Model{FusionNetwork(cfg.candidates, cfg.rule, cfg.base_channels), SegHead(cfg.classes, cfg.base_channels)};
}

double alpha_step(const Model& supernet, ParameterStore<float>& params, Sgd<float>& opt, const SampleBatch& batch,
                  const LossWeights& w) {
  Tape<float> tape(params);
  tape.set_trainable(is_alpha);
  auto loss = cascade_losses(tape, supernet, batch, w).combined;
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericalError("search: non-finite validation loss");
  opt.step(params, tape.backward(loss), is_alpha);
  return value;
}

SearchResult hds_search(const SearchConfig& cfg, const SampleBatch& train, const SampleBatch& val) {
  cfg.validate();
  const Model model = search_model(cfg);
  SearchResult out;
  out.params = init_parameters<float>(model.parameter_specs(), cfg.seed);
  auto not_alpha = [](const std::string& name) { return !is_alpha(name); };

  Adam<float> theta_opt(cfg.theta_opt);
  BatchStream stream(train.size(), cfg.batch_size, derive_seed(cfg.seed, fnv1a("search/train")));
  BatchStream val_stream(val.size(), cfg.batch_size, derive_seed(cfg.seed, fnv1a("search/val")));

  for (int step = 0; step < cfg.warm_start_steps; ++step) {
    Tape<float> tape(out.params);
    tape.set_trainable(not_alpha);
    auto loss = training_objective(tape, model, train.gather(stream.next()), SampleBatch{}, cfg.loss);
    out.warm_curve.push_back(loss.value().item());
    if (!std::isfinite(out.warm_curve.back())) throw DivergenceError("search warm start", out.warm_curve);
    theta_opt.step(out.params, tape.backward(loss), not_alpha);
  }

  // Alpha momentum persists across rounds.
  Sgd<float> alpha_opt(cfg.alpha_opt);
  const int n_adv = static_cast<int>(std::lround(cfg.adv_fraction * cfg.batch_size));
  std::vector<double> val_curve;
  std::uint64_t attack_counter = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    SearchStep rec;
    rec.iteration = it;
    for (int k = 0; k < cfg.param_steps_per_alpha_step; ++k) {
      const SampleBatch batch = train.gather(stream.next());
      SampleBatch clean = n_adv < batch.size() ? batch.slice(0, batch.size() - n_adv) : SampleBatch{};
      SampleBatch attacked;
      if (n_adv > 0) {
        attacked = batch.slice(batch.size() - n_adv, n_adv);
        AttackBudget b = cfg.attack;
        b.seed = derive_seed(cfg.seed, attack_counter++);
        AttackResult r = pgd_attack(model, out.params, attacked, b);
        attacked.x = std::move(r.x_adv);
        attacked.y = std::move(r.y_adv);
      }
      Tape<float> tape(out.params);
      tape.set_trainable(not_alpha);
      auto loss = training_objective(tape, model, clean, attacked, cfg.loss);
      rec.l_tr = loss.value().item();
      if (!std::isfinite(rec.l_tr)) {
        val_curve.push_back(rec.l_tr);
        throw DivergenceError("search lower level", val_curve);
      }
      theta_opt.step(out.params, tape.backward(loss), not_alpha);
    }
    rec.l_val = alpha_step(model, out.params, alpha_opt, val.gather(val_stream.next()), cfg.loss);
    val_curve.push_back(rec.l_val);
    rec.weights = Relaxation::from_store(cfg.candidates, out.params).weights();
    if (!rec.weights.allFinite()) throw DivergenceError("search upper level", val_curve);
    out.history.push_back(std::move(rec));
  }
  out.alpha = Relaxation::from_store(cfg.candidates, out.params);
  out.arch = discretize(out.alpha, cfg.rule, cfg.base_channels);
  return out;
}

Json search_report(const SearchConfig& cfg, const SearchResult& r) {
  Json candidates = Json::array();
  for (const auto& c : cfg.candidates) candidates.push_back(c.name());
  Json steps = Json::array();
  for (const auto& s : r.history) {
    steps.push_back({{"iteration", s.iteration}, {"l_tr", s.l_tr}, {"l_val", s.l_val}, {"weights", matrix_json(s.weights)}});
  }
  return {{"kind", "search_report"},
          {"candidates", candidates},
          {"rule", cfg.rule.name()},
          {"warm_curve", r.warm_curve},
          {"history", steps},
          {"alpha", matrix_json(r.alpha.alpha)},
          {"weights", matrix_json(r.alpha.weights())},
          {"arch", r.arch.to_string()}};
}

}  // namespace afuse
