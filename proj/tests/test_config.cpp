#include <gtest/gtest.h>

#include <fstream>

#include "projforge/bundle.hpp"
#include "projforge/config.hpp"
#include "projforge/fixtures.hpp"
#include "test_util.hpp"

using namespace projforge;

namespace {

void expect_same_range(const TransformRange& a, const TransformRange& b) {
  EXPECT_EQ(a.scale_min, b.scale_min);
  EXPECT_EQ(a.scale_max, b.scale_max);
  EXPECT_EQ(a.shift_fraction, b.shift_fraction);
  EXPECT_EQ(a.rotation_deg, b.rotation_deg);
  EXPECT_EQ(a.brightness, b.brightness);
  EXPECT_EQ(a.noise_sigma, b.noise_sigma);
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(RunConfig, DefaultsMatchLibraryDefaults) {
  const RunConfig rc;
  const AttackConfig a = rc.attack_config(), want;
  EXPECT_EQ(a.lambda, want.lambda);
  EXPECT_EQ(a.p, want.p);
  EXPECT_EQ(a.tv_weight, want.tv_weight);
  EXPECT_EQ(a.step_size, want.step_size);
  EXPECT_EQ(a.iterations, want.iterations);
  EXPECT_EQ(a.seed, want.seed);
  EXPECT_EQ(a.cells, want.cells);
  EXPECT_EQ(a.target_class, want.target_class);
  EXPECT_EQ(a.checkpoint_every, want.checkpoint_every);
  EXPECT_EQ(a.eot.samples_per_step, want.eot.samples_per_step);
  ASSERT_EQ(a.eot.transforms.size(), 1u);
  expect_same_range(a.eot.transforms[0], want.eot.transforms[0]);

  const DetectorTrainConfig d = rc.detector_train(), dw;
  EXPECT_TRUE(d.arch == dw.arch);
  EXPECT_EQ(d.epochs, dw.epochs);
  EXPECT_EQ(d.step_size, dw.step_size);
  EXPECT_EQ(d.batch_size, dw.batch_size);
  EXPECT_EQ(d.box_weight, dw.box_weight);
  EXPECT_EQ(d.label_smoothing, dw.label_smoothing);
  EXPECT_EQ(d.augment, dw.augment);
  EXPECT_EQ(d.seed, dw.seed);

  const ColorTrainConfig c = rc.color_train(), cw;
  EXPECT_EQ(c.hidden, cw.hidden);
  EXPECT_EQ(c.epochs, cw.epochs);
  EXPECT_EQ(c.step_size, cw.step_size);
  EXPECT_EQ(c.batch_size, cw.batch_size);
  EXPECT_EQ(c.seed, cw.seed);

  const SweepConfig s = rc.sweep_config(), sw;
  ASSERT_EQ(s.distances.size(), sw.distances.size());
  for (std::size_t i = 0; i < s.distances.size(); ++i) {
    EXPECT_EQ(s.distances[i].label, sw.distances[i].label);
    EXPECT_EQ(s.distances[i].scale, sw.distances[i].scale);
  }
  EXPECT_EQ(s.frames_per_cell, sw.frames_per_cell);
  EXPECT_EQ(s.seed, sw.seed);
  expect_same_range(s.jitter, sw.jitter);

  EXPECT_EQ(rc.threshold().threshold, 0.6);
  EXPECT_EQ(rc.threshold().target_class, "car");
}

TEST(RunConfig, SaveLoadRoundTrip) {
  test::TempDir tmp;
  RunConfig rc;
  rc.seed = 123456789012345ULL;
  rc.attack.lambda = 0.125;
  rc.attack.transforms = {TransformRange::identity(), TransformRange{0.7, 1.3, 0.2, 5, 0.05, 0.01}};
  rc.sweep.distances = {{"near", 1.0}};
  rc.sweep.ambients = {"dim"};
  rc.sweep.ambient_models = {"dim.txt"};
  rc.detector.path = "det.txt";
  save_config(rc, tmp / "c.json");
  const RunConfig back = load_config(tmp / "c.json");
  EXPECT_EQ(back.seed, rc.seed);
  EXPECT_EQ(back.attack.lambda, 0.125);
  ASSERT_EQ(back.attack.transforms.size(), 2u);
  expect_same_range(back.attack.transforms[1], rc.attack.transforms[1]);
  EXPECT_EQ(back.sweep.ambient_models, rc.sweep.ambient_models);
  EXPECT_EQ(back.detector.path, "det.txt");
  save_config(back, tmp / "d.json");
  EXPECT_EQ(to_json(back).dump(), to_json(rc).dump());
}

TEST(RunConfig, PartialFileOverridesOnly) {
  test::TempDir tmp;
  write(tmp / "c.json", R"({"attack": {"iterations": 3}, "seed": 9})");
  const RunConfig rc = load_config(tmp / "c.json");
  EXPECT_EQ(rc.attack.iterations, 3);
  EXPECT_EQ(rc.seed, 9u);
  EXPECT_EQ(rc.attack.cells, RunConfig{}.attack.cells);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  test::TempDir tmp;
  for (const char* text : {R"({"sead": 1})", R"({"attack": {"lamda": 1}})", R"({"sweep": {"jitter": {"spin": 1}}})",
                           R"({"attack": {"lambda": -1}})", R"({"attack": {"cells": 0}})", R"({"seed": "x"})",
                           R"({"detector": {"threshold": 1.5}})", R"({"detector": {"channels": [1, 2]}})",
                           R"({"sweep": {"ambient_models": ["a.txt"]}})", "{ not json"}) {
    write(tmp / "c.json", text);
    EXPECT_THROW(load_config(tmp / "c.json"), InputError) << text;
  }
  EXPECT_THROW(load_config(tmp / "missing.json"), InputError);
}

TEST(SceneBundle, FixtureLoads) {
  const SceneBundle b = load_scene_bundle(test::fixture_dir() / "bundles" / "angle_15");
  EXPECT_EQ(b.view, "15");
  EXPECT_EQ(b.backgrounds.size(), static_cast<std::size_t>(fixtures::kBackgrounds));
  EXPECT_EQ(b.attack_view.ops.patch_shape.height(), fixtures::kPatchSize);
  EXPECT_EQ(b.attack_view.placement_x, fixtures::kPlacementX);
}

TEST(SceneBundle, SaveLoadRoundTrip) {
  test::TempDir tmp;
  const SceneBundle b = load_scene_bundle(test::fixture_dir() / "bundles" / "angle_m15");
  save_scene_bundle(b, tmp / "copy");
  const SceneBundle c = load_scene_bundle(tmp / "copy");
  EXPECT_EQ(c.view, b.view);
  EXPECT_EQ(c.attack_view.object_img.values(), b.attack_view.object_img.values());
  EXPECT_EQ(c.backgrounds.size(), b.backgrounds.size());
  EXPECT_EQ(c.controls.target.size(), b.controls.target.size());
}

TEST(SceneBundle, MissingFilesAreNamed) {
  test::TempDir tmp;
  const SceneBundle b = load_scene_bundle(test::fixture_dir() / "bundles" / "angle_0");
  for (const char* name : {"controls.txt", "color_model.txt", "object.ppm", "object_mask.ppm", "scene.json"}) {
    const auto dir = tmp / name;
    save_scene_bundle(b, dir);
    std::filesystem::remove(dir / name);
    try {
      load_scene_bundle(dir);
      ADD_FAILURE() << "loaded without " << name;
    } catch (const InputError& e) {
      EXPECT_NE(std::string(e.what()).find(name), std::string::npos) << e.what();
    }
  }
  const auto dir = tmp / "nobg";
  save_scene_bundle(b, dir);
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().filename().string().rfind("background_", 0) == 0) std::filesystem::remove(e.path());
  EXPECT_THROW(load_scene_bundle(dir), InputError);
  EXPECT_THROW(load_scene_bundle(tmp / "nothing"), InputError);
}

TEST(SceneBundle, RejectsUnknownSceneKey) {
  test::TempDir tmp;
  save_scene_bundle(load_scene_bundle(test::fixture_dir() / "bundles" / "angle_0"), tmp / "b");
  write(tmp / "b" / "scene.json", R"({"view": "0", "placement": [12, 12], "patch_size": [20, 20], "tilt": 3})");
  EXPECT_THROW(load_scene_bundle(tmp / "b"), InputError);
}
