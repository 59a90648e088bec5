#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "projforge/autodiff.hpp"
#include "projforge/colormap.hpp"
#include "projforge/error.hpp"
#include "projforge/image.hpp"
#include "projforge/rng.hpp"
#include "projforge/tps.hpp"

namespace projforge {

/// A benign object image with its alpha footprint, and where it sits on a
/// background.
struct SceneSpec {
  ImageBuffer object_img;
  ImageBuffer object_mask;
  ImageBuffer background;
  int placement_x = 0;
  int placement_y = 0;
};

inline void validate(const SceneSpec& s) {
  if (!s.object_img.same_shape(s.object_mask)) {
    throw InputError("scene: object mask does not match object image");
  }
  if (s.placement_x < 0 || s.placement_y < 0 ||
      s.placement_x + s.object_img.width() > s.background.width() ||
      s.placement_y + s.object_img.height() > s.background.height()) {
    throw InputError("scene: object at (" + std::to_string(s.placement_x) + "," +
                     std::to_string(s.placement_y) + ") does not fit the " +
                     std::to_string(s.background.width()) + "x" +
                     std::to_string(s.background.height()) + " background");
  }
}

/// What the projector does to one object view: the geometric warp from the
/// projector plane, the color response, and the patch footprint in the
/// projector plane.
struct ProjectionOperands {
  TpsTransform tps;
  ColorModel color;
  ImageBuffer patch_shape;
};

/// Control sources must lie on the projector plane (one pixel of slack).
inline void check_consistent(const ProjectionOperands& ops) {
  const double w = ops.patch_shape.width(), h = ops.patch_shape.height();
  for (const Point2& p : ops.tps.forward.controls) {
    if (p.x < -1.0 || p.y < -1.0 || p.x > w || p.y > h) {
      throw InputError("projection: TPS control (" + std::to_string(p.x) + "," +
                       std::to_string(p.y) + ") lies outside the " +
                       std::to_string(ops.patch_shape.width()) + "x" +
                       std::to_string(ops.patch_shape.height()) + " patch plane");
    }
  }
  if (!ops.tps.reverse) throw InputError("projection: reverse TPS model unavailable");
}

/// The patch-independent parts of the projection for one object image.
struct ProjectionPlan {
  int height = 0;
  int width = 0;
  int patch_height = 0;
  int patch_width = 0;
  std::shared_ptr<const WarpOperator> warp;  // patch plane -> object image
  ad::Constant mask;                         // M
  ad::Constant gated_surface;                // M * x
  ad::Constant untouched;                    // (1 - M) * x
};

inline ProjectionPlan plan_projection(const ProjectionOperands& ops, const ImageBuffer& x) {
  check_consistent(ops);
  ProjectionPlan plan;
  plan.height = x.height();
  plan.width = x.width();
  plan.patch_height = ops.patch_shape.height();
  plan.patch_width = ops.patch_shape.width();
  const ImageBuffer mask_img = warp_mask(ops.tps, ops.patch_shape, x.height(), x.width());
  plan.warp = std::make_shared<const WarpOperator>(
      build_warp_operator(ops.tps, plan.patch_height, plan.patch_width, x.height(), x.width()));
  const auto& m = mask_img.values();
  const auto& xv = x.values();
  std::vector<double> gated(m.size()), untouched(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    gated[i] = m[i] * xv[i];
    untouched[i] = (1.0 - m[i]) * xv[i];
  }
  plan.mask = ad::make_constant(m);
  plan.gated_surface = ad::make_constant(std::move(gated));
  plan.untouched = ad::make_constant(std::move(untouched));
  return plan;
}

/// Records (1 - M) x + M * clamp(color(M x, warp(delta))) on the tape.
/// `delta` has shape [patch_height, patch_width, 3].
inline ad::Var record_projection(ad::Tape& tape, const ProjectionPlan& plan,
                                 const ColorModelVars& color, ad::Var delta) {
  const int h = plan.height, w = plan.width;
  ad::Var warped = tape.map(delta, plan.warp);
  ad::Var surface = tape.constant({h, w, 3}, *plan.gated_surface);
  ad::Var inputs = tape.reshape(tape.concat(surface, warped), {h * w, 6});
  ad::Var pred = tape.clamp(color_forward(tape, color, inputs), 0.0, 1.0);
  ad::Var overlay = tape.mul_const(tape.reshape(pred, {h, w, 3}), plan.mask);
  return tape.add_const(overlay, plan.untouched);
}

/// A projected object image together with the tape that produced it.
struct ProjectedPatch {
  ImageBuffer image;
  ad::Tape tape;
  ad::Var delta;
  ad::Var output;
};

inline ProjectedPatch project_patch(const ProjectionOperands& ops, const ImageBuffer& x,
                                    const ImageBuffer& delta) {
  if (!delta.same_shape(ops.patch_shape)) {
    throw InputError("project_patch: delta is " + std::to_string(delta.height()) + "x" +
                     std::to_string(delta.width()) + " but the patch shape is " +
                     std::to_string(ops.patch_shape.height()) + "x" +
                     std::to_string(ops.patch_shape.width()));
  }
  const ProjectionPlan plan = plan_projection(ops, x);
  ProjectedPatch out{ImageBuffer(1, 1), ad::Tape{}, {}, {}};
  const ColorModelVars color = bind_color_model(out.tape, ops.color, false);
  out.delta = out.tape.variable({delta.height(), delta.width(), 3}, delta.values());
  out.output = record_projection(out.tape, plan, color, out.delta);
  out.image = ImageBuffer::clamped(x.height(), x.width(), out.tape.value(out.output));
  return out;
}

// ---------------------------------------------------------------------------
// Placement on a background

/// Similarity transform about the object's center plus photometric changes.
struct PlacementTransform {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  double brightness = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;

  bool photometric() const { return brightness != 0.0 || noise_sigma != 0.0; }
};

/// Pull map for an object image whose top-left corner is anchored at
/// (anchor_x, anchor_y) in an out_h x out_w frame, transformed about its
/// center. Parts falling outside the frame are dropped.
inline PixelMap similarity_pull_map(int obj_h, int obj_w, int out_h, int out_w, double anchor_x,
                                    double anchor_y, const PlacementTransform& t) {
  if (!(t.scale > 0.0) || !std::isfinite(t.rotation_deg) || !std::isfinite(t.shift_x) ||
      !std::isfinite(t.shift_y)) {
    throw InputError("placement: scale must be positive and offsets finite");
  }
  const double cx = 0.5 * (obj_w - 1), cy = 0.5 * (obj_h - 1);
  const double sx = anchor_x + cx + t.shift_x;
  const double sy = anchor_y + cy + t.shift_y;
  const double th = t.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  PixelMap map(obj_h, obj_w, out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const double dx = x - sx, dy = y - sy;
      const Point2 p{(cs * dx + sn * dy) / t.scale + cx, (-sn * dx + cs * dy) / t.scale + cy};
      map.set_taps(static_cast<std::size_t>(y) * out_w + x, bilinear_taps(obj_h, obj_w, p));
    }
  }
  return map;
}

/// Pull map from the object image into the background frame.
inline PixelMap placement_map(const SceneSpec& scene, const PlacementTransform& t) {
  validate(scene);
  return similarity_pull_map(scene.object_img.height(), scene.object_img.width(),
                             scene.background.height(), scene.background.width(), scene.placement_x,
                             scene.placement_y, t);
}

/// The attacked-object-independent parts of one placement.
struct PlacementPlan {
  int height = 0;
  int width = 0;
  std::shared_ptr<const PixelMap> map;
  ad::Constant alpha;     // object mask, object frame
  ad::Constant backdrop;  // (1 - T alpha) b + T alpha (brightness + noise)
  bool clamp = false;
};

inline PlacementPlan plan_placement(const SceneSpec& scene, const PlacementTransform& t) {
  PlacementPlan plan;
  plan.height = scene.background.height();
  plan.width = scene.background.width();
  plan.map = std::make_shared<const PixelMap>(placement_map(scene, t));
  plan.alpha = ad::make_constant(scene.object_mask.values());
  const auto moved = plan.map->apply(*plan.alpha, 3);
  const auto& b = scene.background.values();
  std::vector<double> backdrop(b.size());
  Rng noise(t.noise_seed);
  for (std::size_t i = 0; i < b.size(); ++i) {
    backdrop[i] = (1.0 - moved[i]) * b[i];
    if (t.photometric()) {
      const double n = t.noise_sigma > 0.0 ? noise.normal(0.0, t.noise_sigma) : 0.0;
      backdrop[i] += moved[i] * (t.brightness + n);
    }
  }
  plan.backdrop = ad::make_constant(std::move(backdrop));
  plan.clamp = t.photometric();
  return plan;
}

/// Records T(alpha * object) + backdrop, clamped when photometric terms
/// are present. `object` has the object image's shape.
inline ad::Var record_placement(ad::Tape& tape, const PlacementPlan& plan, ad::Var object) {
  ad::Var placed = tape.map(tape.mul_const(object, plan.alpha), plan.map);
  ad::Var out = tape.add_const(placed, plan.backdrop);
  return plan.clamp ? tape.clamp(out, 0.0, 1.0) : out;
}

inline ImageBuffer render_placement(const PlacementPlan& plan, const ImageBuffer& object) {
  const auto& a = *plan.alpha;
  if (object.values().size() != a.size()) {
    throw InputError("render_placement: object does not match the plan");
  }
  std::vector<double> premul(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) premul[i] = a[i] * object.values()[i];
  auto out = plan.map->apply(premul, 3);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*plan.backdrop)[i];
  return ImageBuffer::clamped(plan.height, plan.width, out);
}

/// Alpha-blends `attacked_object` over the background at the scene's integer
/// placement.
inline ImageBuffer compose_scene(const SceneSpec& scene, const ImageBuffer& attacked_object) {
  validate(scene);
  if (!attacked_object.same_shape(scene.object_img)) {
    throw InputError("compose_scene: attacked object does not match the object image");
  }
  std::vector<double> out = scene.background.values();
  const int bw = scene.background.width();
  for (int y = 0; y < attacked_object.height(); ++y) {
    for (int x = 0; x < attacked_object.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const double m = scene.object_mask.at(y, x, c);
        const std::size_t i =
            (static_cast<std::size_t>(y + scene.placement_y) * bw + x + scene.placement_x) * 3 + c;
        out[i] = (1.0 - m) * out[i] + m * attacked_object.at(y, x, c);
      }
    }
  }
  return ImageBuffer::clamped(scene.background.height(), bw, out);
}

}  // namespace projforge
