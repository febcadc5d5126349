#pragma once

#include <cstdint>
#include <vector>

#include "afuse/attacks.hpp"
#include "afuse/checkpoint.hpp"
#include "afuse/model.hpp"
#include "afuse/optim.hpp"
#include "afuse/relaxation.hpp"

namespace afuse {

/// Settings of the robust architecture search. Lower level: theta, omega on
/// mixed clean/attacked batches; upper level: alpha on clean validation batches.
struct SearchConfig {
  std::vector<OpCode> candidates = Relaxation::default_candidates();
  FusionRule rule;  // AA
  int base_channels = 16;
  int classes = 4;
  int warm_start_steps = 200;
  int param_steps_per_alpha_step = 5;
  int iterations = 100;  // alpha steps
  int batch_size = 4;
  double adv_fraction = 0.25;
  AttackBudget attack = AttackBudget::with_epsilon(2.0 / 255.0, 3);
  AdamConfig theta_opt{8e-5};
  SgdConfig alpha_opt{5e-3, 0.9};
  LossWeights loss;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SearchStep {
  int iteration = 0;
  double l_tr = 0.0;   // last lower-level objective of the round
  double l_val = 0.0;  // upper-level loss before the alpha step
  Eigen::MatrixXd weights;  // softmax(alpha) after the step
};

struct SearchResult {
  Relaxation alpha;
  ArchSpec arch;
  std::vector<double> warm_curve;
  std::vector<SearchStep> history;
  ParameterStore<float> params;  // supernet parameters, alpha included
};

/// Supernet plus segmentation head for `cfg`.
Model search_model(const SearchConfig& cfg);

/// First-order alternation: after a clean warm start, each round takes
/// param_steps_per_alpha_step lower-level steps (attacked part regenerated by
/// PGD against the current supernet) and one alpha step on L_val with theta frozen.
SearchResult hds_search(const SearchConfig& cfg, const SampleBatch& train, const SampleBatch& val);

/// One alpha step on `batch` with theta frozen; returns L_val before the step.
double alpha_step(const Model& supernet, ParameterStore<float>& params, Sgd<float>& opt, const SampleBatch& batch,
                  const LossWeights& w);

Json search_report(const SearchConfig& cfg, const SearchResult& r);

}  // namespace afuse
