#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "projforge/bundle.hpp"
#include "projforge/colormap.hpp"
#include "projforge/compositor.hpp"
#include "projforge/detector.hpp"
#include "projforge/error.hpp"
#include "projforge/image_io.hpp"
#include "projforge/synth.hpp"
#include "projforge/tps.hpp"

/// The bundled fixture set and the recipe that regenerates it bit for bit.
///
///   controls_{identity,affine,checkerboard}.txt   control-point sets
///   checkerboard.ppm, colorboard.ppm               projector test images
///   color_{linear,100lux,200lux,500lux}.txt        color models, one per capture law
///   color_dataset_100lux.txt                       the 100lux training samples
///   detector.txt                                   toy detector weights
///   benign_scene.ppm, background_scene.ppm         one car / no car
///   scenes/                                        a few labeled training scenes
///   bundles/angle_<a>/                             one scene bundle per viewing angle
///   omdr10/frame_XX.ppm, omdr10/labels.txt         hand-checked OMDR sequence
namespace projforge::fixtures {

inline constexpr std::array<int, 5> kAngles{-30, -15, 0, 15, 30};
inline constexpr std::array<const char*, 4> kLaws{"linear", "100lux", "200lux", "500lux"};
inline constexpr std::array<const char*, 3> kAmbients{"100lux", "200lux", "500lux"};
inline constexpr int kSceneSize = 32;
inline constexpr int kPatchSize = 20;
inline constexpr int kPlacementX = 12;
inline constexpr int kPlacementY = 12;
inline constexpr int kBackgrounds = 4;
inline constexpr std::uint64_t kSeed = 7;
inline constexpr std::uint64_t kDetectorSceneSeed = 11;
inline constexpr std::size_t kDetectorScenes = 200;
inline constexpr std::uint64_t kHeldOutSeed = 999;
inline constexpr std::size_t kHeldOutScenes = 300;
/// Frames 6..9 of the OMDR sequence have the car covered.
inline constexpr int kOmdrFrames = 10;
inline constexpr int kOmdrCovered = 4;

inline std::string angle_label(int deg) { return std::to_string(deg); }
inline std::string bundle_name(int deg) { return deg < 0 ? "angle_m" + std::to_string(-deg) : "angle_" + std::to_string(deg); }

/// Where the build put the shipped fixtures.
inline std::filesystem::path default_dir() {
#ifdef PROJFORGE_FIXTURE_DIR
  return PROJFORGE_FIXTURE_DIR;
#else
  return "data/fixtures";
#endif
}

inline ControlPointSet identity_controls() {
  const double e = kPatchSize - 1;
  ControlPointSet c;
  c.source = {{0, 0}, {e, 0}, {0, e}, {e, e}, {e / 2, e / 2}};
  c.target = c.source;
  return c;
}

/// Rotation by a few degrees, anisotropic scale and a shift.
inline ControlPointSet affine_controls() {
  const double e = kPatchSize - 1;
  ControlPointSet c;
  c.source = {{0, 0}, {e, 0}, {0, e}, {e, e}, {e / 2, e / 3}, {e / 4, 3 * e / 4}};
  for (const auto& p : c.source) c.target.push_back({0.9 * p.x - 0.12 * p.y + 1.5, 0.08 * p.x + 0.55 * p.y + 2.25});
  return c;
}

inline ControlPointSet checkerboard_controls() { return synth::checkerboard_controls(15.0, kPatchSize); }

inline synth::Sprite car_sprite(int angle) {
  synth::CarStyle style;
  style.view_deg = angle;
  return synth::render_car(style);
}

inline std::vector<ImageBuffer> backgrounds() {
  Rng rng(2024);
  std::vector<ImageBuffer> out;
  for (int i = 0; i < kBackgrounds; ++i) out.push_back(synth::render_background(kSceneSize, kSceneSize, rng));
  return out;
}

inline ColorModel train_law(const std::string& law) {
  return train_color_model(synthesize_random(capture_law(law), 512, kSeed), ColorTrainConfig{}).model;
}

inline SceneBundle make_bundle(int angle, const ColorModel& color) {
  const synth::Sprite car = car_sprite(angle);
  SceneBundle b;
  b.view = angle_label(angle);
  b.controls = synth::checkerboard_controls(angle, kPatchSize);
  b.backgrounds = backgrounds();
  b.attack_view = {b.view, car.image, car.mask, kPlacementX, kPlacementY,
                   {fit_tps_transform(b.controls, 0.0), color, ImageBuffer(kPatchSize, kPatchSize, 1.0)}};
  return b;
}

/// Frame i shows the car on background i mod 4, nudged by up to 1 px; in the
/// last `kOmdrCovered` frames the car is fully occluded and only background remains.
inline std::vector<ImageBuffer> omdr_frames() {
  const synth::Sprite car = car_sprite(0);
  const auto bgs = backgrounds();
  std::vector<ImageBuffer> frames;
  for (int i = 0; i < kOmdrFrames; ++i) {
    const ImageBuffer& bg = bgs[i % bgs.size()];
    if (i >= kOmdrFrames - kOmdrCovered) {
      frames.push_back(bg);
      continue;
    }
    PlacementTransform t;
    t.shift_x = (i % 3) - 1;
    t.shift_y = ((i / 3) % 3) - 1;
    const SceneSpec scene{car.image, car.mask, bg, kPlacementX, kPlacementY};
    frames.push_back(render_placement(plan_placement(scene, t), car.image));
  }
  return frames;
}

inline ImageBuffer benign_scene() {
  const synth::Sprite car = car_sprite(0);
  const auto bg = backgrounds().front();
  return render_placement(plan_placement({car.image, car.mask, bg, kPlacementX, kPlacementY}, {}), car.image);
}

inline DetectorTrainConfig detector_config() { return DetectorTrainConfig{}; }

inline std::vector<LabeledScene> detector_training_scenes() {
  return synth::detector_scenes(kDetectorScenes, kDetectorSceneSeed);
}
inline std::vector<LabeledScene> held_out_scenes() { return synth::detector_scenes(kHeldOutScenes, kHeldOutSeed); }

struct GenerateOptions {
  bool train_detector = true;  // otherwise leave detector.txt untouched
  std::function<void(const std::string&)> log;
};

inline void generate(const std::filesystem::path& dir, const GenerateOptions& opts = {}) {
  namespace fs = std::filesystem;
  auto log = [&](const std::string& m) {
    if (opts.log) opts.log(m);
  };
  fs::create_directories(dir);
  save_control_points(identity_controls(), dir / "controls_identity.txt");
  save_control_points(affine_controls(), dir / "controls_affine.txt");
  save_control_points(checkerboard_controls(), dir / "controls_checkerboard.txt");
  save_image(synth::checkerboard_image(kPatchSize), dir / "checkerboard.ppm");
  save_image(synth::color_board(kPatchSize), dir / "colorboard.ppm");

  std::map<std::string, ColorModel> models;
  for (const char* law : kLaws) {
    log(std::string("color model ") + law);
    models.emplace(law, train_law(law));
    save_color_model(models.at(law), dir / (std::string("color_") + law + ".txt"));
  }
  save_color_dataset(synthesize_random(capture_law("100lux"), 512, kSeed), dir / "color_dataset_100lux.txt");

  if (opts.train_detector) {
    log("detector (" + std::to_string(kDetectorScenes) + " scenes)");
    save_detector(train_toy_detector(detector_training_scenes(), detector_config()).detector, dir / "detector.txt");
  }
  save_labeled_scenes(synth::detector_scenes(8, kDetectorSceneSeed + 1), dir / "scenes");

  save_image(benign_scene(), dir / "benign_scene.ppm");
  save_image(backgrounds().front(), dir / "background_scene.ppm");

  for (int a : kAngles) {
    log("bundle " + bundle_name(a));
    save_scene_bundle(make_bundle(a, models.at("100lux")), dir / "bundles" / bundle_name(a));
  }

  const auto frames = omdr_frames();
  fs::create_directories(dir / "omdr10");
  std::ofstream labels(dir / "omdr10" / "labels.txt");
  labels << "# frame present occluded\n";
  char name[32];
  for (int i = 0; i < kOmdrFrames; ++i) {
    std::snprintf(name, sizeof name, "frame_%02d.ppm", i);
    save_image(frames[i], dir / "omdr10" / name);
    labels << name << " 1 " << (i >= kOmdrFrames - kOmdrCovered ? 1 : 0) << "\n";
  }
}

inline std::vector<SceneBundle> load_bundles(const std::filesystem::path& dir) {
  std::vector<SceneBundle> out;
  for (int a : kAngles) out.push_back(load_scene_bundle(dir / "bundles" / bundle_name(a)));
  return out;
}

}  // namespace projforge::fixtures
