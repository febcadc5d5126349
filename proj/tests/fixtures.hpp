#pragma once

#include <random>

#include "afuse/model.hpp"
#include "afuse/random.hpp"
#include "afuse/scene.hpp"
#include "afuse/training.hpp"

namespace afuse::testing {

template <typename S = double>
Tensor<S> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<S> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(u(rng));
  return t;
}

inline SceneSpec small_scene(std::uint64_t seed = 0) {
  SceneSpec s;
  s.seed = seed;
  s.height = 16;
  s.width = 16;
  return s;
}

/// A 4-channel network cheap enough to train inside a unit test.
inline Model small_model(const ArchSpec& arch = ArchSpec::uniform(OpCode::parse("3-C"), FusionRule::parse("SUM"), 4)) {
  return Model{FusionNetwork(arch), SegHead(kSceneClasses, arch.base_channels)};
}

inline JointConfig small_joint(int steps) {
  JointConfig j;
  j.steps = steps;
  j.batch_size = 4;
  j.adam.lr = 3e-3;
  return j;
}

/// small_model() cleanly trained on 64 small scenes; computed once per process.
inline const ParameterStore<float>& trained_small_params() {
  static const ParameterStore<float> params = [] {
    const auto data = generate_dataset(small_scene(), 64);
    return normal_train(small_model(), data.samples, small_joint(150), 1).params;
  }();
  return params;
}

}  // namespace afuse::testing
