#include "afuse/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

namespace {

/// Largest float not exceeding epsilon.
float float_floor(double epsilon) {
  auto e = static_cast<float>(epsilon);
  if (static_cast<double>(e) > epsilon) e = std::nextafter(e, 0.0f);
  return e;
}

/// Clips x + delta to [0,1], then walks any element whose rounded offset
/// exceeds epsilon one ulp back toward x until it fits.
Tensor<float> apply_delta(const Tensor<float>& x, const Tensor<float>& delta, double epsilon) {
  Tensor<float> out(x.shape(), (x.array() + delta.array()).max(0.0f).min(1.0f).eval());
  for (std::size_t i = 0; i < out.size(); ++i) {
    while (std::abs(static_cast<double>(out[i]) - static_cast<double>(x[i])) > epsilon) {
      out[i] = std::nextafter(out[i], x[i]);
    }
  }
  return out;
}

void check_images(const Tensor<float>& x, const Tensor<float>& y) {
  if (x.shape() != y.shape()) {
    throw ValidationError("attack: image shapes " + to_string(x.shape()) + " and " + to_string(y.shape()) + " differ");
  }
  if (x.rank() != 4) throw ValidationError("attack: images must be (B,1,H,W), got " + to_string(x.shape()));
  if ((x.array() < 0.0f).any() || (x.array() > 1.0f).any() || (y.array() < 0.0f).any() || (y.array() > 1.0f).any()) {
    throw ValidationError("attack: input images must lie in [0,1]");
  }
}

}  // namespace

AttackBudget AttackBudget::with_epsilon(double epsilon, int steps, std::uint64_t seed) {
  AttackBudget b;
  b.epsilon = epsilon;
  b.eta = epsilon / 4.0;
  b.steps = steps;
  b.seed = seed;
  return b;
}

void AttackBudget::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ValidationError("attack budget: epsilon must be >= 0");
  if (steps < 0) throw ValidationError("attack budget: steps must be >= 0");
  if (steps > 0 && epsilon > 0.0 && !(eta > 0.0)) throw ValidationError("attack budget: eta must be > 0");
}

template <typename S>
Tensor<S> project_linf(const Tensor<S>& delta, double epsilon) {
  if (epsilon < 0.0) throw ValidationError("project_linf: epsilon must be >= 0");
  const S e = std::is_same_v<S, float> ? static_cast<S>(float_floor(epsilon)) : static_cast<S>(epsilon);
  return Tensor<S>(delta.shape(), delta.array().max(-e).min(e).eval());
}

template Tensor<float> project_linf(const Tensor<float>&, double);
template Tensor<double> project_linf(const Tensor<double>&, double);

double linf_distance(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw ValidationError("linf_distance: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

namespace {

/// Shared PGD loop. With `params` bound the parameters enter as constants.
AttackResult pgd_loop(const AttackObjective& objective, const ParameterStore<float>* params, const Tensor<float>& x,
                      const Tensor<float>& y, const AttackBudget& budget, int sample_offset) {
  budget.validate();
  check_images(x, y);
  const float eta = static_cast<float>(budget.eta);

  Tensor<float> dx(x.shape());
  Tensor<float> dy(y.shape());
  if (budget.random_start && budget.epsilon > 0.0) {
    const float e = float_floor(budget.epsilon);
    const std::size_t per = x.size() / static_cast<std::size_t>(x.dim(0));
    for (int n = 0; n < x.dim(0); ++n) {
      Rng rng(derive_seed(budget.seed, static_cast<std::uint64_t>(sample_offset + n)));
      std::uniform_real_distribution<float> u(-e, e);
      for (std::size_t i = 0; i < per; ++i) dx[n * per + i] = u(rng);
      for (std::size_t i = 0; i < per; ++i) dy[n * per + i] = u(rng);
    }
  }

  auto ascend = [&](const Tensor<float>& d, const Tensor<float>& g) {
    return project_linf<float>(Tensor<float>(d.shape(), (d.array() + eta * g.array().sign()).eval()), budget.epsilon);
  };

  AttackResult r;
  r.x_adv = apply_delta(x, dx, budget.epsilon);
  r.y_adv = apply_delta(y, dy, budget.epsilon);
  for (int step = 0; step <= budget.steps; ++step) {
    std::optional<Tape<float>> tape;
    if (params) {
      tape.emplace(*params);
      tape->set_trainable([](const std::string&) { return false; });
    } else {
      tape.emplace();
    }
    auto xv = tape->input("attack/x", r.x_adv);
    auto yv = tape->input("attack/y", r.y_adv);
    auto loss = objective(*tape, xv, yv);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      throw NumericalError("pgd: non-finite attacked loss at iteration " + std::to_string(step) + " (epsilon " +
                           std::to_string(budget.epsilon) + ")");
    }
    r.loss_trace.push_back(value);
    if (step == budget.steps) break;
    const auto grads = tape->backward(loss);
    dx = ascend(dx, grads.at("attack/x"));
    dy = ascend(dy, grads.at("attack/y"));
    r.x_adv = apply_delta(x, dx, budget.epsilon);
    r.y_adv = apply_delta(y, dy, budget.epsilon);
  }
  r.delta_ir = Tensor<float>(x.shape(), (r.x_adv.array() - x.array()).eval());
  r.delta_vis = Tensor<float>(y.shape(), (r.y_adv.array() - y.array()).eval());
  return r;
}

}  // namespace

AttackResult pgd_attack(const AttackObjective& objective, const Tensor<float>& x, const Tensor<float>& y,
                        const AttackBudget& budget, int sample_offset) {
  return pgd_loop(objective, nullptr, x, y, budget, sample_offset);
}

AttackResult pgd_attack(const Model& model, const ParameterStore<float>& params, const SampleBatch& batch,
                        const AttackBudget& budget, int sample_offset) {
  AttackObjective task_loss = [&](Tape<float>& tape, Var<float> x, Var<float> y) {
    return cross_entropy(model.forward(tape, x, y).logits, batch.labels);
  };
  return pgd_loop(task_loss, &params, batch.x, batch.y, budget, sample_offset);
}

SampleBatch attack_dataset(const Model& model, const ParameterStore<float>& params, const SampleBatch& data,
                           const AttackBudget& budget, int chunk) {
  if (chunk <= 0) throw ValidationError("attack_dataset: chunk must be positive");
  SampleBatch out;
  for (int start = 0; start < data.size(); start += chunk) {
    const int count = std::min(chunk, data.size() - start);
    SampleBatch part = data.slice(start, count);
    if (budget.epsilon > 0.0 && budget.steps > 0) {
      AttackResult r = pgd_attack(model, params, part, budget, start);
      part.x = std::move(r.x_adv);
      part.y = std::move(r.y_adv);
    }
    out = SampleBatch::join(out, part);
  }
  return out;
}

bool AttackedDataset::verify(const SampleBatch& clean) const {
  const SampleBatch ref = clean.gather(indices);
  if (ref.size() != samples.size() || ref.labels != samples.labels) return false;
  auto in_unit = [](const Tensor<float>& t) { return (t.array() >= 0.0f).all() && (t.array() <= 1.0f).all(); };
  return in_unit(samples.x) && in_unit(samples.y) && linf_distance(samples.x, ref.x) <= budget.epsilon &&
         linf_distance(samples.y, ref.y) <= budget.epsilon;
}

ArchSpec offline_source_arch(int base_channels) {
  return ArchSpec::uniform(OpCode::parse("3-DB"), FusionRule::parse("CC"), base_channels);
}

std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double val_fraction, std::uint64_t split_seed) {
  if (n < 2) throw ValidationError("split needs at least 2 samples");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ValidationError("val_fraction must lie in (0,1)");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(split_seed, fnv1a("split")));
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  const int n_val = std::clamp(static_cast<int>(std::lround(val_fraction * n)), 1, n - 1);
  std::vector<int> val(order.begin(), order.begin() + n_val);
  std::vector<int> train(order.begin() + n_val, order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

std::vector<AttackLevelSet> generate_offline_attack_set(const Model& source, const ParameterStore<float>& params,
                                                        const SampleBatch& data, const std::vector<AttackBudget>& levels,
                                                        std::uint64_t split_seed, double val_fraction) {
  if (levels.empty()) throw ValidationError("offline attack generation needs at least one level");
  const ArchSpec expected = offline_source_arch(source.fusion.base_channels());
  if (source.fusion.relaxed() || !(source.fusion.arch() == expected)) {
    throw ValidationError("offline attack source must be " + expected.to_string());
  }
  check_parameters(source.parameter_specs(), params, "offline attack source");
  const std::string provenance = content_hash(params);
  const auto [train_idx, val_idx] = split_indices(data.size(), val_fraction, split_seed);
  const SampleBatch train = data.gather(train_idx);
  const SampleBatch val = data.gather(val_idx);

  std::vector<AttackLevelSet> out;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    AttackBudget b = levels[i];
    b.seed = derive_seed(split_seed, i + 1);
    auto make = [&](const SampleBatch& part, const std::vector<int>& idx, const char* split) {
      AttackedDataset d;
      d.level = static_cast<int>(i) + 1;
      d.budget = b;
      d.split = split;
      d.provenance = provenance;
      d.indices = idx;
      d.samples = attack_dataset(source, params, part, b);
      return d;
    };
    out.push_back({make(train, train_idx, "train"), make(val, val_idx, "val")});
  }
  return out;
}

double parse_epsilon(const Json& j) {
  double value = 0.0;
  if (j.is_number()) {
    value = j.get<double>();
  } else if (j.is_string()) {
    const auto text = j.get<std::string>();
    auto number = [&](const std::string& part) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(part, &used);
      } catch (const std::exception&) {
        throw ValidationError("bad epsilon '" + text + "'");
      }
      if (used != part.size()) throw ValidationError("bad epsilon '" + text + "'");
      return v;
    };
    const auto slash = text.find('/');
    value = slash == std::string::npos ? number(text) : number(text.substr(0, slash)) / number(text.substr(slash + 1));
  } else {
    throw ValidationError("epsilon must be a number or a fraction string");
  }
  if (!std::isfinite(value) || value < 0.0) throw ValidationError("epsilon must be finite and >= 0");
  return value;
}

Json to_json(const AttackBudget& b) {
  return {{"epsilon", b.epsilon}, {"eta", b.eta}, {"steps", b.steps}, {"seed", b.seed}, {"random_start", b.random_start}};
}

AttackBudget budget_from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("attack budget must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "epsilon" && key != "eta" && key != "steps" && key != "seed" && key != "random_start") {
      throw ValidationError("unknown attack budget key '" + key + "'");
    }
  }
  AttackBudget b = AttackBudget::with_epsilon(parse_epsilon(j.at("epsilon")), j.value("steps", 5),
                                              j.value("seed", std::uint64_t{0}));
  if (j.contains("eta")) b.eta = parse_epsilon(j.at("eta"));
  b.random_start = j.value("random_start", false);
  b.validate();
  return b;
}

void save_attacked_dataset(const std::filesystem::path& dir, const AttackedDataset& d) {
  const std::string stem = "level" + std::to_string(d.level) + "_" + d.split;
  Json meta = {{"level", d.level}, {"split", d.split}, {"provenance", d.provenance}, {"indices", d.indices}};
  save_checkpoint(dir / (stem + ".ckpt"), to_checkpoint(d.samples, meta));
  Json manifest = {{"level", d.level},
                   {"split", d.split},
                   {"budget", to_json(d.budget)},
                   {"provenance", d.provenance},
                   {"samples", d.samples.size()},
                   {"payload", stem + ".ckpt"},
                   {"content_hash", content_hash(d.samples)}};
  write_json(dir / (stem + ".json"), manifest);
}

AttackedDataset load_attacked_dataset(const std::filesystem::path& manifest) {
  const Json m = read_json(manifest);
  const Checkpoint c = load_checkpoint(manifest.parent_path() / m.at("payload").get<std::string>());
  AttackedDataset d;
  d.level = m.at("level").get<int>();
  d.split = m.at("split").get<std::string>();
  d.budget = budget_from_json(m.at("budget"));
  d.provenance = m.at("provenance").get<std::string>();
  d.indices = c.meta.at("indices").get<std::vector<int>>();
  d.samples = to_batch(c);
  if (content_hash(d.samples) != m.at("content_hash").get<std::string>()) {
    throw ValidationError("attacked dataset '" + manifest.string() + "' does not match its manifest hash");
  }
  return d;
}

}  // namespace afuse
