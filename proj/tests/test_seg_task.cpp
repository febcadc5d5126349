#include <doctest.h>

#include <cmath>
#include <random>

#include "afuse/errors.hpp"
#include "afuse/parameters.hpp"
#include "afuse/random.hpp"
#include "afuse/seg_task.hpp"

using namespace afuse;

TEST_CASE("cross entropy of uniform logits is ln K") {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>({2, 4, 3, 3}, 0.7));
  LabelMap labels(18);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 4);
  CHECK(cross_entropy(logits, labels).value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy with p = 3/4 on the true class") {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>({1, 2, 1, 1}, {std::log(3.0), 0.0}));
  CHECK(cross_entropy(logits, {0}).value().item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(cross_entropy(logits, {0}).value().item() == doctest::Approx(0.2877).epsilon(1e-4));
}

TEST_CASE("cross entropy vanishes as the true-class margin grows") {
  Tape<double> tape;
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 40.0}) {
    auto logits = tape.constant(Tensor<double>({1, 3, 1, 1}, {margin, 0.0, 0.0}));
    const double l = cross_entropy(logits, {0}).value().item();
    CHECK(l < previous);
    CHECK(l >= 0.0);
    previous = l;
  }
  CHECK(previous < 1e-16);
}

TEST_CASE("cross entropy rejects labels outside [0, K)") {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>({1, 2, 1, 2}));
  CHECK_THROWS_AS(cross_entropy(logits, {0, 2}), ValidationError);
  CHECK_THROWS_AS(cross_entropy(logits, {-1, 0}), ValidationError);
  CHECK_THROWS(cross_entropy(logits, {0}));
}

TEST_CASE("zero classifier predicts the uniform distribution") {
  const SegHead head(4, 8);
  auto params = init_parameters<double>(head.parameter_specs(), 3);
  for (const auto& [name, t] : head.parameter_specs()) {
    if (name.starts_with("seg/classifier")) params.set(name, Tensor<double>(t.shape));
  }
  Rng rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> img({2, 1, 6, 6});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = u(rng);
  Tape<double> tape(params);
  auto logits = head.forward(tape, tape.constant(img));
  CHECK(logits.shape() == Shape{2, 4, 6, 6});
  LabelMap labels(72, 2);
  CHECK(cross_entropy(logits, labels).value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("predict_labels is the per-pixel argmax") {
  Tensor<float> logits({1, 3, 1, 2}, {0.1f, 2.0f, 0.5f, -1.0f, 0.2f, 3.0f});
  CHECK(predict_labels(logits) == LabelMap{1, 2});
}

TEST_CASE("mIoU on a hand-counted example is 7/12") {
  const std::vector<int> pred{0, 0, 1, 1};
  const std::vector<int> truth{0, 1, 1, 1};
  const auto r = miou(pred, truth, 2);
  CHECK(r.per_class[0] == doctest::Approx(0.5));
  CHECK(r.per_class[1] == doctest::Approx(2.0 / 3.0));
  CHECK(r.mean == doctest::Approx(7.0 / 12.0));
}

TEST_CASE("mIoU is 1 on identical maps and 0 on complementary binary maps") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> truth(64);
    for (auto& t : truth) t = static_cast<int>(rng() % 2);
    truth[0] = 0;
    truth[1] = 1;
    CHECK(miou(truth, truth, 2).mean == 1.0);
    std::vector<int> flipped(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) flipped[i] = 1 - truth[i];
    CHECK(miou(flipped, truth, 2).mean == 0.0);
  }
}

TEST_CASE("classes absent from both maps are excluded from the mean") {
  const std::vector<int> pred{0, 0, 2, 2};
  const auto r = miou(pred, pred, 4);
  CHECK(std::isnan(r.per_class[1]));
  CHECK(std::isnan(r.per_class[3]));
  CHECK(r.mean == 1.0);
}

TEST_CASE("confusion matrix accumulates across calls and rejects bad input") {
  ConfusionMatrix cm(3);
  const std::vector<int> a{0, 1, 2}, b{0, 2, 2};
  cm.add(a, b);
  cm.add(a, b);
  CHECK(cm.counts()(2, 1) == 2);
  CHECK(cm.counts()(0, 0) == 2);
  CHECK(cm.counts().sum() == 6);
  CHECK(miou(cm).mean == doctest::Approx((1.0 + 0.0 + 0.5) / 3.0));
  const std::vector<int> short_pred{0};
  CHECK_THROWS_AS(cm.add(short_pred, b), ValidationError);
  const std::vector<int> out_of_range{0, 3, 1};
  CHECK_THROWS_AS(cm.add(out_of_range, b), ValidationError);
}
