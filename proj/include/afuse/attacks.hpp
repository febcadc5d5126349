#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "afuse/batch.hpp"
#include "afuse/checkpoint.hpp"
#include "afuse/model.hpp"

namespace afuse {

/// l-infinity PGD budget in image units ([0,1]); 4/255 ~= 0.01568.
struct AttackBudget {
  double epsilon = 4.0 / 255.0;
  double eta = 1.0 / 255.0;  // step size; with_epsilon() keeps eta = epsilon / 4
  int steps = 5;
  std::uint64_t seed = 0;
  bool random_start = false;  // uniform start inside the ball; off by default

  static AttackBudget with_epsilon(double epsilon, int steps = 5, std::uint64_t seed = 0);
  void validate() const;
};

struct AttackResult {
  Tensor<float> x_adv;
  Tensor<float> y_adv;
  Tensor<float> delta_ir;   // x_adv - x
  Tensor<float> delta_vis;  // y_adv - y
  /// Attacked loss before each step, then after the last: steps + 1 values.
  std::vector<double> loss_trace;

  double clean_loss() const { return loss_trace.front(); }
  double final_loss() const { return loss_trace.back(); }
};

/// Elementwise clamp to [-epsilon, epsilon].
template <typename S>
Tensor<S> project_linf(const Tensor<S>& delta, double epsilon);

/// Largest |a - b| over elements, computed exactly in double.
double linf_distance(const Tensor<float>& a, const Tensor<float>& b);

/// Scalar loss of the (perturbed) pair; must be built on the given tape.
using AttackObjective = std::function<Var<float>(Tape<float>&, Var<float> x, Var<float> y)>;

/// Joint sign-gradient ascent on both modalities. Each step projects to the
/// epsilon ball and then clips to [0,1]; the result satisfies
/// |x_adv - x| <= epsilon exactly. A random start for sample n draws from
/// derive_seed(budget.seed, sample_offset + n).
AttackResult pgd_attack(const AttackObjective& objective, const Tensor<float>& x, const Tensor<float>& y,
                        const AttackBudget& budget, int sample_offset = 0);

/// PGD against the task loss of N o T. Parameters are held fixed.
AttackResult pgd_attack(const Model& model, const ParameterStore<float>& params, const SampleBatch& batch,
                        const AttackBudget& budget, int sample_offset = 0);

/// Attacks `data` in chunks of `chunk` samples and returns the attacked copy.
/// Per-chunk results do not depend on chunking except for random starts,
/// which are keyed by (budget.seed, sample index).
SampleBatch attack_dataset(const Model& model, const ParameterStore<float>& params, const SampleBatch& data,
                           const AttackBudget& budget, int chunk = 8);

struct AttackedDataset {
  int level = 1;  // 1-based
  AttackBudget budget;
  std::string split;       // "train" or "val"
  std::string provenance;  // source checkpoint content hash
  std::vector<int> indices;  // positions in the clean dataset
  SampleBatch samples;

  /// Re-checks every sample against the budget and [0,1].
  bool verify(const SampleBatch& clean) const;
};

struct AttackLevelSet {
  AttackedDataset train;
  AttackedDataset val;
};

/// The transfer-attack source: 3-DB in every slot, concatenation rule.
ArchSpec offline_source_arch(int base_channels);

/// Splits deterministically by split_seed, then attacks both halves with
/// every level against the source model. Rejects a source whose parameters
/// do not match `source_arch`.
std::vector<AttackLevelSet> generate_offline_attack_set(const Model& source, const ParameterStore<float>& params,
                                                        const SampleBatch& data, const std::vector<AttackBudget>& levels,
                                                        std::uint64_t split_seed, double val_fraction = 0.25);

/// Deterministic split of [0, n) into (train, val) index lists.
std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double val_fraction, std::uint64_t split_seed);

/// Manifest `<stem>.json` plus tensors `<stem>.ckpt`.
void save_attacked_dataset(const std::filesystem::path& dir, const AttackedDataset& d);
AttackedDataset load_attacked_dataset(const std::filesystem::path& manifest);

/// Accepts a number or an exact fraction string such as "4/255".
double parse_epsilon(const Json& j);

Json to_json(const AttackBudget& b);
/// Unknown keys are rejected; eta defaults to epsilon / 4.
AttackBudget budget_from_json(const Json& j);

}  // namespace afuse
