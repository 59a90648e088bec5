#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "projforge/attack.hpp"
#include "projforge/colormap.hpp"
#include "projforge/error.hpp"
#include "projforge/image_io.hpp"
#include "projforge/tps.hpp"

namespace projforge {

/// One view of the target as stored on disk:
///   object.ppm, object_mask.ppm, background_*.ppm, controls.txt,
///   color_model.txt, scene.json {"view", "placement": [x, y], "patch_size": [h, w]}.
/// The patch shape is all ones at patch size.
struct SceneBundle {
  std::string view;
  AttackView attack_view;
  ControlPointSet controls;
  std::vector<ImageBuffer> backgrounds;
};

namespace detail {

inline std::filesystem::path require_file(const std::filesystem::path& dir, const std::string& name) {
  const auto p = dir / name;
  if (!std::filesystem::is_regular_file(p)) {
    throw InputError("scene bundle '" + dir.string() + "': missing " + name);
  }
  return p;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline SceneBundle load_scene_bundle(const std::filesystem::path& dir, double tps_regularization = 0.0) {
  if (!std::filesystem::is_directory(dir)) throw InputError("scene bundle '" + dir.string() + "' is not a directory");
  const nlohmann::json meta = detail::read_json(detail::require_file(dir, "scene.json"));
  SceneBundle b;
  int patch_h = 0, patch_w = 0;
  try {
    if (!meta.is_object()) throw InputError("scene.json must hold an object");
    for (const auto& [key, value] : meta.items()) {
      if (key != "view" && key != "placement" && key != "patch_size") {
        throw InputError("scene.json: unknown key '" + key + "'");
      }
    }
    b.view = meta.at("view").get<std::string>();
    const auto place = meta.at("placement").get<std::vector<int>>();
    const auto size = meta.at("patch_size").get<std::vector<int>>();
    if (place.size() != 2 || size.size() != 2) throw InputError("scene.json: placement and patch_size take two integers");
    b.attack_view.placement_x = place[0];
    b.attack_view.placement_y = place[1];
    patch_h = size[0];
    patch_w = size[1];
  } catch (const nlohmann::json::exception& e) {
    throw InputError((dir / "scene.json").string() + ": " + e.what());
  }
  if (patch_h < 1 || patch_w < 1) throw InputError("scene.json: patch_size must be positive");

  b.attack_view.label = b.view;
  b.attack_view.object_img = load_image(detail::require_file(dir, "object.ppm"));
  b.attack_view.object_mask = load_image(detail::require_file(dir, "object_mask.ppm"));
  b.controls = load_control_points(detail::require_file(dir, "controls.txt"));
  b.attack_view.ops.tps = fit_tps_transform(b.controls, tps_regularization);
  b.attack_view.ops.color = load_color_model(detail::require_file(dir, "color_model.txt"));
  b.attack_view.ops.patch_shape = ImageBuffer(patch_h, patch_w, 1.0);
  check_consistent(b.attack_view.ops);

  std::vector<std::filesystem::path> bgs;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("background_", 0) == 0 && e.path().extension() == ".ppm") {
      bgs.push_back(e.path());
    }
  }
  if (bgs.empty()) throw InputError("scene bundle '" + dir.string() + "': missing background_*.ppm");
  std::sort(bgs.begin(), bgs.end());
  for (const auto& p : bgs) b.backgrounds.push_back(load_image(p));
  for (const auto& bg : b.backgrounds) validate(b.attack_view.scene(bg));
  return b;
}

inline void save_scene_bundle(const SceneBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const AttackView& v = b.attack_view;
  save_image(v.object_img, dir / "object.ppm");
  save_image(v.object_mask, dir / "object_mask.ppm");
  save_control_points(b.controls, dir / "controls.txt");
  save_color_model(v.ops.color, dir / "color_model.txt");
  char name[32];
  for (std::size_t i = 0; i < b.backgrounds.size(); ++i) {
    std::snprintf(name, sizeof name, "background_%02zu.ppm", i);
    save_image(b.backgrounds[i], dir / name);
  }
  nlohmann::ordered_json meta;
  meta["view"] = b.view;
  meta["placement"] = {v.placement_x, v.placement_y};
  meta["patch_size"] = {v.ops.patch_shape.height(), v.ops.patch_shape.width()};
  std::ofstream out(dir / "scene.json");
  if (!out) throw InputError("cannot write '" + (dir / "scene.json").string() + "'");
  out << meta.dump(2) << "\n";
}

}  // namespace projforge
