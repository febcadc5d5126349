#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "afuse/attacks.hpp"
#include "afuse/checkpoint.hpp"
#include "afuse/model.hpp"
#include "afuse/optim.hpp"

namespace afuse {

/// Epoch-wise shuffled minibatch indices; the sequence depends only on (n, batch, seed).
class BatchStream {
 public:
  BatchStream(int n, int batch_size, std::uint64_t seed);
  std::vector<int> next();

 private:
  void reshuffle();

  int n_;
  int batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<int> order_;
};

void accumulate(Gradients<float>& acc, const Gradients<float>& g, float scale = 1.0f);

/// Joint training of N o T on L_tr + lambda * L_tr^at. Each batch is split
/// into a clean part and an attacked part of round(adv_fraction * B) samples
/// whose PGD examples are regenerated against the current parameters.
struct JointConfig {
  int steps = 600;
  int batch_size = 4;
  AdamConfig adam{1e-3};
  double adv_fraction = 0.5;
  AttackBudget attack = AttackBudget::with_epsilon(8.0 / 255.0, 5);
  LossWeights loss;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PhaseResult {
  ParameterStore<float> params;
  std::vector<double> curve;
};

PhaseResult joint_adversarial_train(const Model& model, ParameterStore<float> params, const SampleBatch& train,
                                    const JointConfig& cfg);
/// As above from freshly initialized parameters.
PhaseResult standard_adversarial_train(const Model& model, const SampleBatch& train, const JointConfig& cfg,
                                       std::uint64_t init_seed);
/// Clean joint training: adv_fraction 0.
PhaseResult normal_train(const Model& model, const SampleBatch& train, JointConfig cfg, std::uint64_t init_seed);

struct AATConfig {
  std::vector<double> level_epsilons{1.0 / 255.0, 2.0 / 255.0, 4.0 / 255.0};
  int level_attack_steps = 5;
  double val_fraction = 0.25;
  int attack_samples = 200;  // training pairs drawn for the offline attack sets
  int source_steps = 300;    // standard adversarial training of the transfer-attack source
  int inner_steps = 10;
  double inner_lr = 1e-4;
  double outer_lr = 1e-3;
  int outer_iterations = 50;
  double converge_tol = 1e-3;
  int converge_window = 5;
  int pretext_batch = 4;
  int warm_steps = 50;
  double warm_lr = 1e-4;
  bool reuse_seg_head = false;
  JointConfig joint;

  void validate() const;
};

struct LevelAdaptation {
  double pre = 0.0;   // L_F at theta' on the level's validation split
  double post = 0.0;  // after inner_steps adaptation from theta'
};

struct PretextResult {
  ParameterStore<float> theta;  // fusion parameters only
  std::vector<double> outer_curve;
  std::vector<LevelAdaptation> levels;
  int iterations = 0;
};

/// Single inner adaptation: inner_steps of plain gradient descent on L_F over
/// batches of `data`. Works on a copy; `theta` is never modified.
ParameterStore<float> adapt(const FusionNetwork& fusion, const ParameterStore<float>& theta, const SampleBatch& data,
                            const AATConfig& cfg, std::uint64_t stream_seed);

/// Multi-attack pretext initialization of the fusion parameters (first-order
/// meta-gradient: the outer step applies the gradient taken at each adapted
/// theta^i to theta).
PretextResult pretext_initialize(const FusionNetwork& fusion, const ParameterStore<float>& theta0,
                                 const std::vector<AttackLevelSet>& attacked, const AATConfig& cfg, std::uint64_t seed);

/// Full-batch descent on L_F over the union of all levels' attacked train data.
PhaseResult warm_start_fusion(const FusionNetwork& fusion, const ParameterStore<float>& theta,
                              const std::vector<AttackLevelSet>& attacked, const AATConfig& cfg);

enum class Strategy { kNormal, kSat, kAat };
std::string to_string(Strategy s);
Strategy strategy_from_string(std::string_view text);

struct TrainingRun {
  Strategy strategy = Strategy::kNormal;
  ParameterStore<float> params;  // final theta*, omega*
  std::map<std::string, ParameterStore<float>> checkpoints;  // by phase
  std::map<std::string, std::vector<double>> curves;
  Json provenance = Json::object();

  /// Writes <phase>.ckpt files and manifest.json.
  void save(const std::filesystem::path& dir, const Json& config) const;
  static TrainingRun load(const std::filesystem::path& dir);
};

/// The offline stage of AAT: a SAT-trained source network and the attacked
/// level sets generated against it from a random pool of training pairs.
struct OfflineAttacks {
  ParameterStore<float> source_params;
  std::vector<double> source_curve;
  std::vector<int> pool;  // sorted training indices that were attacked
  std::vector<AttackLevelSet> sets;
};

OfflineAttacks prepare_offline_attacks(const Model& model, const SampleBatch& train, const AATConfig& cfg,
                                       std::uint64_t init_seed);

/// Level, budget, source hash and content hashes of each attacked set.
Json describe(const std::vector<AttackLevelSet>& sets);

/// Runs one strategy end to end with the shared joint-phase data stream.
/// All strategies draw their initial theta, omega from init_seed.
TrainingRun train_strategy(Strategy strategy, const Model& model, const SampleBatch& train, const AATConfig& cfg,
                           std::uint64_t init_seed);

}  // namespace afuse
