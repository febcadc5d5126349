#include "afuse/scene.hpp"

#include <algorithm>
#include <cmath>

#include "afuse/errors.hpp"
#include "afuse/random.hpp"

namespace afuse {

namespace {

struct Blob {
  double cy, cx, r;
};

struct StripeRect {
  int y0, x0, y1, x1;
  bool vertical;
  int period;
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

void SceneSpec::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("scene spec: ") + what);
  };
  require(height >= 8 && width >= 8, "image must be at least 8x8");
  require(blobs_min >= 1 && blobs_max >= blobs_min, "blob count range invalid");
  require(stripes_min >= 0 && stripes_max >= stripes_min, "stripe count range invalid");
  require(blob_radius_min > 0 && blob_radius_max >= blob_radius_min && blob_radius_max < 0.5, "blob radius range invalid");
  require(stripe_size_min > 0 && stripe_size_max >= stripe_size_min && stripe_size_max <= 1, "stripe size range invalid");
  require(stripe_on_blob >= 0 && stripe_on_blob <= 1, "stripe_on_blob must lie in [0,1]");
  require(illumination_min >= 0 && illumination_max >= illumination_min && illumination_max <= 1,
          "illumination range invalid");
  require(amplitude_min > 0 && amplitude_max >= amplitude_min, "amplitude range invalid");
  require(illumination_min - amplitude_max >= 0 && illumination_max + amplitude_max <= 1,
          "striped pixels would leave [0,1]");
  require(ir_background >= 0 && ir_hot <= 1 && ir_background < 0.5 && ir_hot > 0.5, "infrared levels invalid");
  require(noise >= 0, "noise must be >= 0");
}

Json SceneSpec::to_json() const {
  return {{"seed", seed},
          {"height", height},
          {"width", width},
          {"blobs_min", blobs_min},
          {"blobs_max", blobs_max},
          {"blob_radius_min", blob_radius_min},
          {"blob_radius_max", blob_radius_max},
          {"stripes_min", stripes_min},
          {"stripes_max", stripes_max},
          {"stripe_size_min", stripe_size_min},
          {"stripe_size_max", stripe_size_max},
          {"stripe_on_blob", stripe_on_blob},
          {"illumination_min", illumination_min},
          {"illumination_max", illumination_max},
          {"amplitude_min", amplitude_min},
          {"amplitude_max", amplitude_max},
          {"ir_background", ir_background},
          {"ir_hot", ir_hot},
          {"noise", noise}};
}

SceneSpec SceneSpec::from_json(const Json& j) {
  SceneSpec s;
  const Json defaults = s.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ValidationError("unknown scene key '" + key + "'");
  }
  Json merged = defaults;
  merged.update(j);
  s.seed = merged["seed"].get<std::uint64_t>();
  s.height = merged["height"].get<int>();
  s.width = merged["width"].get<int>();
  s.blobs_min = merged["blobs_min"].get<int>();
  s.blobs_max = merged["blobs_max"].get<int>();
  s.blob_radius_min = merged["blob_radius_min"].get<double>();
  s.blob_radius_max = merged["blob_radius_max"].get<double>();
  s.stripes_min = merged["stripes_min"].get<int>();
  s.stripes_max = merged["stripes_max"].get<int>();
  s.stripe_size_min = merged["stripe_size_min"].get<double>();
  s.stripe_size_max = merged["stripe_size_max"].get<double>();
  s.stripe_on_blob = merged["stripe_on_blob"].get<double>();
  s.illumination_min = merged["illumination_min"].get<double>();
  s.illumination_max = merged["illumination_max"].get<double>();
  s.amplitude_min = merged["amplitude_min"].get<double>();
  s.amplitude_max = merged["amplitude_max"].get<double>();
  s.ir_background = merged["ir_background"].get<double>();
  s.ir_hot = merged["ir_hot"].get<double>();
  s.noise = merged["noise"].get<double>();
  s.validate();
  return s;
}

SyntheticDataset generate_dataset(const SceneSpec& spec, int n, int first_index) {
  spec.validate();
  if (n < 1) throw ValidationError("dataset size must be >= 1");
  const int H = spec.height, W = spec.width;
  const std::size_t P = static_cast<std::size_t>(H) * W;
  SyntheticDataset out;
  out.samples.x = Tensor<float>({n, 1, H, W});
  out.samples.y = Tensor<float>({n, 1, H, W});
  out.samples.labels.assign(static_cast<std::size_t>(n) * P, 0);
  out.info.resize(static_cast<std::size_t>(n));

  for (int s = 0; s < n; ++s) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(first_index + s)));
    std::vector<bool> hot(P), striped(P);
    std::vector<double> texture(P, 0.0);
    SceneInfo info;
    // Redraw until the label map holds at least two classes.
    for (;;) {
      std::fill(hot.begin(), hot.end(), false);
      std::fill(striped.begin(), striped.end(), false);
      std::fill(texture.begin(), texture.end(), 0.0);
      const double side = std::min(H, W);
      std::vector<Blob> blobs(static_cast<std::size_t>(uniform_int(rng, spec.blobs_min, spec.blobs_max)));
      for (auto& b : blobs) {
        b.r = side * uniform(rng, spec.blob_radius_min, spec.blob_radius_max);
        b.cy = uniform(rng, b.r, H - b.r);
        b.cx = uniform(rng, b.r, W - b.r);
      }
      const int n_stripes = uniform_int(rng, spec.stripes_min, spec.stripes_max);
      std::vector<StripeRect> rects;
      for (int k = 0; k < n_stripes; ++k) {
        const int h = std::max(2, static_cast<int>(std::lround(H * uniform(rng, spec.stripe_size_min, spec.stripe_size_max))));
        const int w = std::max(2, static_cast<int>(std::lround(W * uniform(rng, spec.stripe_size_min, spec.stripe_size_max))));
        int cy, cx;
        if (uniform(rng, 0.0, 1.0) < spec.stripe_on_blob) {
          const Blob& b = blobs[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(blobs.size()) - 1))];
          cy = static_cast<int>(b.cy);
          cx = static_cast<int>(b.cx);
        } else {
          cy = uniform_int(rng, 0, H - 1);
          cx = uniform_int(rng, 0, W - 1);
        }
        StripeRect r;
        r.y0 = std::clamp(cy - h / 2, 0, H - 1);
        r.x0 = std::clamp(cx - w / 2, 0, W - 1);
        r.y1 = std::min(H, r.y0 + h);
        r.x1 = std::min(W, r.x0 + w);
        r.vertical = uniform(rng, 0.0, 1.0) < 0.5;
        r.period = uniform(rng, 0.0, 1.0) < 0.5 ? 2 : 4;
        rects.push_back(r);
      }
      info.illumination = uniform(rng, spec.illumination_min, spec.illumination_max);
      info.amplitude = uniform(rng, spec.amplitude_min, spec.amplitude_max);

      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          const std::size_t p = static_cast<std::size_t>(i) * W + j;
          for (const auto& b : blobs) {
            const double dy = i + 0.5 - b.cy, dx = j + 0.5 - b.cx;
            if (dy * dy + dx * dx <= b.r * b.r) hot[p] = true;
          }
          for (const auto& r : rects) {
            if (i >= r.y0 && i < r.y1 && j >= r.x0 && j < r.x1) {
              striped[p] = true;
              const int phase = (r.vertical ? j : i) % r.period;
              texture[p] = phase < r.period / 2 ? 1.0 : -1.0;
            }
          }
        }
      }
      bool seen[kSceneClasses] = {};
      for (std::size_t p = 0; p < P; ++p) seen[(hot[p] ? 1 : 0) + (striped[p] ? 2 : 0)] = true;
      if (std::count(std::begin(seen), std::end(seen), true) >= 2) break;
    }

    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t at = static_cast<std::size_t>(s) * P + p;
      const double ir = hot[p] ? spec.ir_hot : spec.ir_background;
      const double vis = info.illumination + info.amplitude * texture[p];
      const double nx = spec.noise > 0 ? spec.noise * noise(rng) : 0.0;
      const double ny = spec.noise > 0 ? spec.noise * noise(rng) : 0.0;
      out.samples.x[at] = static_cast<float>(std::clamp(ir + nx, 0.0, 1.0));
      out.samples.y[at] = static_cast<float>(std::clamp(vis + ny, 0.0, 1.0));
      out.samples.labels[at] = (hot[p] ? kHotBlob : 0) + (striped[p] ? kStripes : 0);
    }
    out.info[static_cast<std::size_t>(s)] = info;
  }
  return out;
}

LabelMap oracle_classifier(const SyntheticDataset& data) {
  const auto& b = data.samples;
  const std::size_t P = b.labels.size() / static_cast<std::size_t>(b.size());
  LabelMap pred(b.labels.size());
  for (int s = 0; s < b.size(); ++s) {
    const SceneInfo& info = data.info[static_cast<std::size_t>(s)];
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t at = static_cast<std::size_t>(s) * P + p;
      const bool hot = b.x[at] > 0.5f;
      const bool striped = std::abs(static_cast<double>(b.y[at]) - info.illumination) > info.amplitude / 2;
      pred[at] = (hot ? kHotBlob : 0) + (striped ? kStripes : 0);
    }
  }
  return pred;
}

LabelMap ir_only_classifier(const SampleBatch& data) {
  LabelMap pred(data.labels.size());
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = data.x[i] > 0.5f ? kJointCue : kBackground;
  return pred;
}

}  // namespace afuse
