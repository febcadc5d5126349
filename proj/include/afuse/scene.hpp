#pragma once

#include <cstdint>
#include <vector>

#include "afuse/batch.hpp"
#include "afuse/checkpoint.hpp"

namespace afuse {

/// Class ids of the synthetic scenes.
enum SceneClass : int {
  kBackground = 0,
  kHotBlob = 1,     // bright and flat in infrared, invisible in the visible channel
  kStripes = 2,     // high-frequency texture in the visible channel only
  kJointCue = 3,    // hot and striped: needs both channels
};
inline constexpr int kSceneClasses = 4;

/// Generator for paired infrared/visible scenes with complementary cues.
struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 32;
  int width = 32;
  int blobs_min = 1;
  int blobs_max = 3;
  double blob_radius_min = 0.12;  // fractions of the shorter side
  double blob_radius_max = 0.25;
  int stripes_min = 1;
  int stripes_max = 2;
  double stripe_size_min = 0.25;  // rectangle extents, fractions of the side
  double stripe_size_max = 0.5;
  double stripe_on_blob = 0.6;    // chance a stripe region is centred on a blob
  double illumination_min = 0.25;
  double illumination_max = 0.75;
  double amplitude_min = 0.06;
  double amplitude_max = 0.15;
  double ir_background = 0.2;
  double ir_hot = 0.85;
  double noise = 0.02;

  void validate() const;
  Json to_json() const;
  /// Unknown keys are rejected.
  static SceneSpec from_json(const Json& j);
};

/// Render constants kept alongside the images for the constructive oracle.
struct SceneInfo {
  double illumination = 0.0;
  double amplitude = 0.0;
};

struct SyntheticDataset {
  SampleBatch samples;
  std::vector<SceneInfo> info;
};

/// Sample i depends only on (spec, i).
SyntheticDataset generate_dataset(const SceneSpec& spec, int n, int first_index = 0);

/// Labels from both channels plus the render constants: hot where IR > 0.5,
/// striped where |vis - illumination| > amplitude / 2. Exact at zero noise.
LabelMap oracle_classifier(const SyntheticDataset& data);

/// The best an infrared-only threshold can do on the joint class: predicts
/// the joint class wherever IR > 0.5 and background elsewhere.
LabelMap ir_only_classifier(const SampleBatch& data);

}  // namespace afuse
