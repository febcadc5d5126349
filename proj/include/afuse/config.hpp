#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "afuse/attacks.hpp"
#include "afuse/checkpoint.hpp"
#include "afuse/scene.hpp"
#include "afuse/search.hpp"
#include "afuse/training.hpp"

namespace afuse {

inline constexpr int kConfigSchemaVersion = 1;

struct DataConfig {
  int train = 256;
  int val = 64;
  int test = 64;
};

struct SweepConfig {
  std::vector<OpCode> ops;
  std::vector<FusionRule> rules;
  std::vector<AttackBudget> budgets;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int steps = 1500;  // SAT steps per variant
};

/// Everything a run needs; a manifest stores this snapshot and replays from it.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  SceneSpec scene;
  DataConfig data;
  ArchSpec arch = ArchSpec::searched_reference(16);
  int classes = 4;
  SearchConfig search;
  AATConfig aat;
  AttackBudget eval_attack = AttackBudget::with_epsilon(4.0 / 255.0, 5);
  int eval_batch = 16;
  SweepConfig sweep;
  std::vector<std::uint64_t> trend_seeds{0, 1, 2};

  /// The documented desk-scale defaults (32x32 images, 16 channels).
  static ExperimentConfig defaults();
  /// Smaller settings used for the acceptance experiments.
  static ExperimentConfig reference();

  Model model() const { return Model{FusionNetwork(arch), SegHead(classes, arch.base_channels)}; }
  void validate() const;
};

Json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const Json& j);
Json to_json(const JointConfig& c);
JointConfig joint_config_from_json(const Json& j, const JointConfig& base = {});
Json to_json(const AATConfig& c);
AATConfig aat_config_from_json(const Json& j, const AATConfig& base = {});
Json to_json(const SearchConfig& c);
SearchConfig search_config_from_json(const Json& j, const SearchConfig& base = {});
Json to_json(const SweepConfig& c);
SweepConfig sweep_config_from_json(const Json& j, const SweepConfig& base = {});
Json to_json(const ExperimentConfig& c);
/// Fields absent from `j` keep the values of `base` (or of the named
/// "preset": "defaults" | "reference"); unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const Json& j, const ExperimentConfig& base = ExperimentConfig::defaults());
ExperimentConfig load_config(const std::filesystem::path& path);

/// The datasets of a config: train, val and test draw disjoint sample indices.
struct ExperimentData {
  SyntheticDataset train;
  SyntheticDataset val;
  SyntheticDataset test;
};
ExperimentData make_data(const ExperimentConfig& cfg);

}  // namespace afuse
