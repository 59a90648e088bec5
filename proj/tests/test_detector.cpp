#include <gtest/gtest.h>

#include <cmath>

#include "projforge/autodiff.hpp"
#include "projforge/detector.hpp"
#include "projforge/fixtures.hpp"
#include "projforge/image_io.hpp"
#include "projforge/synth.hpp"
#include "test_util.hpp"

using namespace projforge;

namespace {

ImageBuffer random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(h) * w * 3);
  for (double& x : v) x = rng.uniform();
  return ImageBuffer(h, w, v);
}

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Direct loops over the network: centered input, three strided stages with
// rectifiers, then the head; returns the head as [rows][cols][channels].
std::vector<std::vector<std::vector<double>>> reference_head(const ToyDetector& det, const ImageBuffer& img) {
  using Map = std::vector<std::vector<std::vector<double>>>;
  Map x(img.height(), std::vector<std::vector<double>>(img.width(), std::vector<double>(3)));
  for (int y = 0; y < img.height(); ++y)
    for (int xx = 0; xx < img.width(); ++xx)
      for (int c = 0; c < 3; ++c) x[y][xx][c] = img.at(y, xx, c) - 0.5;
  for (int layer = 0; layer < 4; ++layer) {
    const auto [co, k, ci] = det.layer_dims(layer);
    const int stride = layer < 3 ? 2 : 1;
    const int h = static_cast<int>(x.size()), w = static_cast<int>(x[0].size());
    const int oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
    const auto wt = det.weights(layer);
    const auto bs = det.biases(layer);
    Map y(oh, std::vector<std::vector<double>>(ow, std::vector<double>(co)));
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int o = 0; o < co; ++o) {
          double s = bs[o];
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - 1 + ky, ix = ox * stride - 1 + kx;
              if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
              for (int c = 0; c < ci; ++c) s += wt[((o * k + ky) * k + kx) * ci + c] * x[iy][ix][c];
            }
          y[oy][ox][o] = layer < 3 ? std::max(0.0, s) : s;
        }
    x = std::move(y);
  }
  return x;
}

LabeledScene scene_with(const std::string& label, Box box, std::uint64_t seed) {
  return {random_image(32, 32, seed), {{label, box}}};
}

}  // namespace

TEST(ToyDetector, ZeroParametersGiveHalfConfidence) {
  const ToyDetector det;
  const auto raw = det.raw_detections(ImageBuffer(32, 32, 0.0));
  ASSERT_EQ(raw.size(), 16u);
  for (const auto& d : raw) {
    EXPECT_EQ(d.objectness, 0.5);
    for (double s : d.class_scores) EXPECT_EQ(s, 0.5);
  }
}

TEST(DetectionLoss, SingleCellProduct) {
  ToyDetector det;
  auto b = det.biases(3);
  b[0] = std::log(0.8 / 0.2);  // objectness 0.8
  b[1] = 0.0;                  // car 0.5
  EXPECT_NEAR(detection_loss(det, ImageBuffer(8, 8, 0.3), "car"), 0.4, 1e-12);
}

TEST(DetectionLoss, ZeroClassScoresGiveZero) {
  ToyDetector det = ToyDetector::initialized({}, 3);
  for (double& w : det.weights(3)) w = 0.0;
  det.biases(3)[1] = -800.0;
  const double j = detection_loss(det, random_image(32, 32, 4), "car");
  EXPECT_EQ(j, 0.0);
}

TEST(DetectionLoss, MatchesDirectSummation) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const ToyDetector det = ToyDetector::initialized({}, seed);
    const ImageBuffer img = random_image(32, 32, seed + 100);
    const auto head = reference_head(det, img);
    double want = 0.0;
    for (const auto& row : head)
      for (const auto& cell : row) want += logistic(cell[0]) * logistic(cell[1]);
    const double got = detection_loss(det, img, "car");
    EXPECT_NEAR(got, want, 1e-12 * std::max(1.0, want));
    EXPECT_GE(got, 0.0);
  }
}

TEST(DetectionLoss, GradientMatchesFiniteDifferences) {
  const ToyDetector det = ToyDetector::initialized({}, 5);
  const ImageBuffer img = random_image(32, 32, 6);
  const ad::ScalarFunction f = [&](std::span<const double> x, std::vector<double>* grad) {
    ad::Tape t;
    const ad::Var in = t.variable({32, 32, 3}, std::vector<double>(x.begin(), x.end()));
    const ad::Var j = det.record_detection_loss(t, in, 0);
    const double v = t.scalar(j);
    if (grad) {
      const auto g = t.backward(j).of(in);
      grad->assign(g.begin(), g.end());
    }
    return v;
  };
  const auto report = ad::check_gradients(f, img.values(), 1e-6, 1e-4, 60, 17);
  EXPECT_TRUE(report.passed) << "worst relative error " << report.worst_relative_error;
  EXPECT_GE(report.checked, 50);
}

TEST(DetectionLoss, Errors) {
  const ToyDetector det;
  EXPECT_THROW(detection_loss(det, ImageBuffer(30, 32, 0.5), "car"), InputError);
  EXPECT_THROW(detection_loss(det, ImageBuffer(32, 32, 0.5), "truck"), InputError);
  EXPECT_THROW(detect(det, ImageBuffer(32, 12, 0.5)), InputError);
}

TEST(Detect, ReportedIsSubsetOfThresholdedRaw) {
  const ToyDetector det = ToyDetector::initialized({}, 9);
  for (std::uint64_t s : {1, 2, 3, 4}) {
    const ImageBuffer img = random_image(32, 32, s);
    const auto raw = det.raw_detections(img);
    for (const auto& d : detect(det, img, 0.2)) {
      const bool found = std::any_of(raw.begin(), raw.end(), [&](const Detection& r) {
        return r.box.x_min == d.box.x_min && r.box.y_min == d.box.y_min &&
               r.objectness * r.class_scores[d.label] == d.score;
      });
      EXPECT_TRUE(found);
      EXPECT_GE(d.score, 0.2);
      EXPECT_LT(d.box.x_min, d.box.x_max);
      EXPECT_LT(d.box.y_min, d.box.y_max);
    }
  }
}

TEST(NonMaxSuppression, KeepsBestPerClass) {
  auto det = [](Box b, int label, double score) {
    Detection d;
    d.box = b;
    d.label = label;
    d.score = score;
    return d;
  };
  const auto kept = non_max_suppression({det({0, 0, 10, 10}, 0, 0.7), det({1, 1, 11, 11}, 0, 0.9),
                                         det({1, 1, 11, 11}, 1, 0.8), det({20, 20, 30, 30}, 0, 0.6)},
                                        0.5);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_EQ(kept[1].label, 1);
  EXPECT_EQ(kept[2].score, 0.6);
}

TEST(Threshold, Validated) {
  EXPECT_THROW((DetectorThreshold{1.0, "car"}).validate(), InputError);
  EXPECT_THROW((DetectorThreshold{0.0, "car"}).validate(), InputError);
  EXPECT_NO_THROW((DetectorThreshold{0.6, "car"}).validate());
}

TEST(TrainToyDetector, ZeroEpochsReturnsInitialization) {
  DetectorTrainConfig cfg;
  cfg.epochs = 0;
  const auto data = synth::detector_scenes(12, 3);
  const auto r = train_toy_detector(data, cfg);
  EXPECT_TRUE(r.detector == ToyDetector::initialized(cfg.arch, cfg.seed));
}

TEST(TrainToyDetector, DeterministicGivenSeed) {
  DetectorTrainConfig cfg;
  cfg.epochs = 2;
  cfg.arch.channels = {4, 8, 8};
  const auto data = synth::detector_scenes(20, 4);
  EXPECT_TRUE(train_toy_detector(data, cfg).detector == train_toy_detector(data, cfg).detector);
}

TEST(TrainToyDetector, DuplicatedDatasetReachesSameLoss) {
  // Full-batch steps: duplicating every scene leaves the mean loss and its
  // gradient unchanged, so both runs follow the same path.
  DetectorTrainConfig cfg;
  cfg.epochs = 60;
  cfg.arch.channels = {8, 16, 16};
  cfg.augment = false;
  const auto data = synth::detector_scenes(32, 21);
  auto doubled = data;
  doubled.insert(doubled.end(), data.begin(), data.end());
  cfg.batch_size = static_cast<int>(data.size());
  const double once = train_toy_detector(data, cfg).final_loss;
  cfg.batch_size = static_cast<int>(doubled.size());
  const double twice = train_toy_detector(doubled, cfg).final_loss;
  EXPECT_NEAR(twice, once, 0.05 * once) << "original " << once << " duplicated " << twice;
}

TEST(TrainToyDetector, RejectsUnusableData) {
  DetectorTrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train_toy_detector({scene_with("car", {2, 2, 10, 10}, 1)}, cfg), InputError);
  EXPECT_THROW(train_toy_detector({scene_with("cone", {2, 2, 10, 10}, 1)}, cfg), InputError);
  EXPECT_THROW(train_toy_detector({scene_with("car", {2, 2, 10, 10}, 1), scene_with("bus", {2, 2, 10, 10}, 2)}, cfg),
               InputError);
  cfg.batch_size = 0;
  EXPECT_THROW(train_toy_detector({scene_with("car", {2, 2, 10, 10}, 1), scene_with("cone", {2, 2, 8, 8}, 2)}, cfg),
               InputError);
}

TEST(DetectorFile, RoundTripIsExact) {
  test::TempDir tmp;
  const ToyDetector det = ToyDetector::initialized({4, 6, 8}, 77);
  save_detector(det, tmp / "d.txt");
  EXPECT_TRUE(load_detector(tmp / "d.txt") == det);
  EXPECT_THROW(load_detector(tmp / "missing.txt"), InputError);
}

TEST(LabeledScenes, RoundTrip) {
  test::TempDir tmp;
  const auto scenes = synth::detector_scenes(5, 8);
  save_labeled_scenes(scenes, tmp.path());
  const auto back = load_labeled_scenes(tmp.path());
  ASSERT_EQ(back.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) ASSERT_EQ(back[i].objects.size(), scenes[i].objects.size());
}

TEST(FixtureDetector, OneCarOnBenignSceneNoneOnBackground) {
  const auto dir = test::fixture_dir();
  const ToyDetector det = load_detector(dir / "detector.txt");
  const int car = det.class_index("car");
  auto cars = [&](const ImageBuffer& img) {
    int n = 0;
    for (const auto& d : detect(det, img, 0.6))
      if (d.label == car && d.score > 0.6) ++n;
    return n;
  };
  EXPECT_EQ(cars(load_image(dir / "benign_scene.ppm")), 1);
  EXPECT_EQ(cars(load_image(dir / "background_scene.ppm")), 0);
}

TEST(FixtureDetector, HeldOutBenignRateAtLeast95Percent) {
  const ToyDetector det = load_detector(test::fixture_dir() / "detector.txt");
  EXPECT_GE(benign_detection_rate(det, fixtures::held_out_scenes(), DetectorThreshold{}), 0.95);
}
