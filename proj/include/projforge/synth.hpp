#pragma once

// Procedural stand-ins for captured data: car, cone and clutter sprites,
// cluttered backgrounds, checkerboard control points on a curved body panel,
// and labeled detector scenes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "projforge/compositor.hpp"
#include "projforge/detector.hpp"
#include "projforge/image.hpp"
#include "projforge/rng.hpp"
#include "projforge/tps.hpp"

namespace projforge::synth {

/// RGB plus coverage, painted back to front with 4x4 supersampled edges.
class Canvas {
 public:
  Canvas(int height, int width, const Rgb& fill = {0, 0, 0}, double alpha = 0.0)
      : h_(height), w_(width), color_(static_cast<std::size_t>(height) * width * 3),
        alpha_(static_cast<std::size_t>(height) * width, alpha) {
    for (std::size_t p = 0; p < alpha_.size(); ++p)
      for (int c = 0; c < 3; ++c) color_[p * 3 + c] = fill[c];
  }

  /// Paints `color` over the region where `inside(x, y)` holds; (x, y) are
  /// continuous coordinates with pixel (i, j) covering [j, j+1) x [i, i+1).
  void paint(const std::function<bool(double, double)>& inside, const Rgb& color) {
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx)
            if (inside(x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0)) ++hits;
        if (hits == 0) continue;
        const double cov = hits / 16.0;
        const std::size_t p = static_cast<std::size_t>(y) * w_ + x;
        for (int c = 0; c < 3; ++c) color_[p * 3 + c] = (1 - cov) * color_[p * 3 + c] + cov * color[c];
        alpha_[p] = cov + (1 - cov) * alpha_[p];
      }
    }
  }

  void rect(double x0, double y0, double x1, double y1, const Rgb& color) {
    paint([=](double x, double y) { return x >= x0 && x < x1 && y >= y0 && y < y1; }, color);
  }

  void ellipse(double cx, double cy, double rx, double ry, const Rgb& color) {
    paint([=](double x, double y) {
      const double u = (x - cx) / rx, v = (y - cy) / ry;
      return u * u + v * v <= 1.0;
    }, color);
  }

  /// Convex polygon, vertices in either winding.
  void polygon(std::vector<Point2> pts, const Rgb& color) {
    paint([pts](double x, double y) {
      int sign = 0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const Point2& a = pts[i];
        const Point2& b = pts[(i + 1) % pts.size()];
        const double cr = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
        const int s = cr > 0 ? 1 : (cr < 0 ? -1 : 0);
        if (s == 0) continue;
        if (sign == 0) sign = s;
        if (s != sign) return false;
      }
      return true;
    }, color);
  }

  ImageBuffer image() const { return ImageBuffer::clamped(h_, w_, color_); }

  ImageBuffer alpha() const {
    std::vector<double> a(alpha_.size() * 3);
    for (std::size_t p = 0; p < alpha_.size(); ++p)
      for (int c = 0; c < 3; ++c) a[p * 3 + c] = alpha_[p];
    return ImageBuffer::clamped(h_, w_, a);
  }

 private:
  int h_, w_;
  std::vector<double> color_;
  std::vector<double> alpha_;
};

/// An object image on a transparent field plus its coverage mask.
struct Sprite {
  ImageBuffer image;
  ImageBuffer mask;
};

inline Rgb scaled(const Rgb& c, double k) {
  return {std::clamp(c[0] * k, 0.0, 1.0), std::clamp(c[1] * k, 0.0, 1.0), std::clamp(c[2] * k, 0.0, 1.0)};
}

constexpr int kSpriteSize = 16;

/// Horizontal extent of the car's side panel at a viewing angle.
struct CarLayout {
  double side_x0 = 0.0;
  double side_width = 0.0;
  double end_x0 = 0.0;
  double end_width = 0.0;
};

inline CarLayout car_layout(double view_deg) {
  const double th = view_deg * std::numbers::pi / 180.0;
  CarLayout l;
  l.side_width = 14.0 * std::cos(th);
  l.end_width = 5.0 * std::abs(std::sin(th));
  const double left = 0.5 * (kSpriteSize - l.side_width - l.end_width);
  if (view_deg >= 0) {
    l.side_x0 = left;
    l.end_x0 = left + l.side_width;
  } else {
    l.end_x0 = left;
    l.side_x0 = left + l.end_width;
  }
  return l;
}

struct CarStyle {
  Rgb body{0.78, 0.16, 0.13};
  Rgb window{0.55, 0.72, 0.88};
  double view_deg = 0.0;
};

/// Side view of a car, turned by `view_deg` so part of one end shows.
inline Sprite render_car(const CarStyle& style) {
  const CarLayout l = car_layout(style.view_deg);
  const double x0 = l.side_x0, ws = l.side_width;
  Canvas cv(kSpriteSize, kSpriteSize);
  const Rgb end_color = scaled(style.body, 0.7);
  if (l.end_width > 0.05) {
    cv.rect(l.end_x0, 6.5, l.end_x0 + l.end_width, 12.0, end_color);
    const bool front_right = style.view_deg >= 0;
    const double lx = front_right ? l.end_x0 + 0.6 * l.end_width : l.end_x0 + 0.4 * l.end_width;
    cv.ellipse(lx, 8.0, std::max(0.4, 0.25 * l.end_width), 0.6, {0.95, 0.9, 0.55});
  }
  cv.rect(x0, 6.5, x0 + ws, 12.0, style.body);
  cv.polygon({{x0 + 0.22 * ws, 6.6}, {x0 + 0.34 * ws, 3.0}, {x0 + 0.70 * ws, 3.0}, {x0 + 0.84 * ws, 6.6}},
             style.body);
  cv.polygon({{x0 + 0.28 * ws, 6.4}, {x0 + 0.37 * ws, 3.8}, {x0 + 0.67 * ws, 3.8}, {x0 + 0.77 * ws, 6.4}},
             style.window);
  cv.rect(x0 + 0.515 * ws, 3.6, x0 + 0.545 * ws + 0.3, 6.6, style.body);
  for (double fx : {0.22, 0.78}) {
    cv.ellipse(x0 + fx * ws, 12.2, 1.9, 1.9, {0.07, 0.07, 0.08});
    cv.ellipse(x0 + fx * ws, 12.2, 0.7, 0.7, {0.6, 0.6, 0.62});
  }
  return {cv.image(), cv.alpha()};
}

/// Ground-truth projector-plane to object-image map for a view: the
/// projector square lands on the side panel, foreshortened toward the far
/// end and bowed by the panel's curvature. Returns pixel-center coordinates.
inline Point2 panel_point(double view_deg, int projector_size, Point2 q) {
  const CarLayout l = car_layout(view_deg);
  const double u = q.x / (projector_size - 1), v = q.y / (projector_size - 1);
  const double k = 0.35 * std::sin(view_deg * std::numbers::pi / 180.0);
  const double s = u + k * u * (1.0 - u);
  return {l.side_x0 + 0.1 + (l.side_width - 1.2) * s,
          6.4 + 4.4 * v + 0.5 * std::sin(std::numbers::pi * u) * (1.0 - v)};
}

/// Checkerboard corners on the projector plane with their captured positions.
inline ControlPointSet checkerboard_controls(double view_deg, int projector_size, int squares = 4) {
  ControlPointSet cps;
  for (int j = 0; j <= squares; ++j) {
    for (int i = 0; i <= squares; ++i) {
      const Point2 q{(projector_size - 1) * static_cast<double>(i) / squares,
                     (projector_size - 1) * static_cast<double>(j) / squares};
      cps.source.push_back(q);
      cps.target.push_back(panel_point(view_deg, projector_size, q));
    }
  }
  return cps;
}

/// Projector image with `squares` x `squares` alternating black and white
/// cells, used to visualize a fitted warp.
inline ImageBuffer checkerboard_image(int size, int squares = 4) {
  ImageBuffer img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int cx = std::min(squares - 1, x * squares / size);
      const int cy = std::min(squares - 1, y * squares / size);
      img.set_pixel(y, x, (cx + cy) % 2 ? Rgb{1, 1, 1} : Rgb{0, 0, 0});
    }
  return img;
}

/// A grid of distinct saturated swatches for color calibration.
inline ImageBuffer color_board(int size, int cells = 4) {
  ImageBuffer img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const int i = std::min(cells - 1, x * cells / size) + cells * std::min(cells - 1, y * cells / size);
      const double t = static_cast<double>(i) / (cells * cells - 1);
      img.set_pixel(y, x, {0.5 + 0.5 * std::cos(2 * std::numbers::pi * t),
                           0.5 + 0.5 * std::cos(2 * std::numbers::pi * (t - 1.0 / 3)),
                           0.5 + 0.5 * std::cos(2 * std::numbers::pi * (t - 2.0 / 3)) * (i % 2 ? 0.4 : 1.0)});
    }
  return img;
}

inline Sprite render_cone(const Rgb& color) {
  Canvas cv(kSpriteSize, kSpriteSize);
  cv.rect(3.0, 13.0, 13.0, 14.5, scaled(color, 0.6));
  cv.polygon({{8.0, 1.5}, {12.0, 13.2}, {4.0, 13.2}}, color);
  cv.polygon({{6.45, 6.0}, {9.55, 6.0}, {10.15, 7.8}, {5.85, 7.8}}, {0.95, 0.95, 0.95});
  return {cv.image(), cv.alpha()};
}

/// Pedestrian-like or box-like clutter that is neither a car nor a cone.
inline Sprite render_other(Rng& rng) {
  Canvas cv(kSpriteSize, kSpriteSize);
  const Rgb a{rng.uniform(), rng.uniform(), rng.uniform()};
  const Rgb b{rng.uniform(), rng.uniform(), rng.uniform()};
  if (rng.below(2) == 0) {
    cv.ellipse(8.0, 3.5, 2.0, 2.0, {0.85, 0.7, 0.55});
    cv.rect(6.0, 5.5, 10.0, 10.5, a);
    cv.rect(6.2, 10.5, 7.8, 15.0, b);
    cv.rect(8.2, 10.5, 9.8, 15.0, b);
  } else {
    cv.rect(3.0, 4.0, 13.0, 14.0, a);
    cv.rect(3.0, 8.0, 13.0, 9.5, b);
    cv.rect(7.2, 4.0, 8.8, 14.0, b);
  }
  return {cv.image(), cv.alpha()};
}

/// Ground and sky bands with a few blocks of clutter and mild noise.
inline ImageBuffer render_background(int height, int width, Rng& rng) {
  const Rgb sky{rng.uniform(0.4, 0.9), rng.uniform(0.4, 0.9), rng.uniform(0.5, 1.0)};
  const Rgb ground{rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.5)};
  const double horizon = rng.uniform(0.3, 0.7) * height;
  Canvas cv(height, width, sky, 1.0);
  cv.rect(0, horizon, width, height, ground);
  const int blocks = rng.uniform_int(1, 4);
  for (int i = 0; i < blocks; ++i) {
    const double bw = rng.uniform(3, 12), bh = rng.uniform(3, 14);
    const double x0 = rng.uniform(-2, width - 2), y0 = rng.uniform(0, height - 3);
    const Rgb c{rng.uniform(), rng.uniform(), rng.uniform()};
    if (rng.below(3) == 0) {
      cv.ellipse(x0, y0, 0.5 * bw, 0.5 * bh, c);
    } else {
      cv.rect(x0, y0, x0 + bw, y0 + bh, c);
    }
  }
  ImageBuffer img = cv.image();
  std::vector<double> v = img.values();
  for (double& x : v) x += rng.normal(0.0, 0.02);
  return ImageBuffer::clamped(height, width, v);
}

/// Tight box around mask coverage above one half.
inline Box coverage_box(const ImageBuffer& mask) {
  Box b{1e9, 1e9, -1e9, -1e9};
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.at(y, x, 0) > 0.5) {
        b.x_min = std::min(b.x_min, double(x));
        b.y_min = std::min(b.y_min, double(y));
        b.x_max = std::max(b.x_max, double(x + 1));
        b.y_max = std::max(b.y_max, double(y + 1));
      }
  return b;
}

/// Places a sprite on `frame` and returns the covered box, or an empty box
/// when too little of the sprite is visible.
inline std::optional<Box> stamp(ImageBuffer& frame, const Sprite& sprite, int px, int py,
                                const PlacementTransform& t) {
  const PixelMap map = similarity_pull_map(sprite.image.height(), sprite.image.width(), frame.height(),
                                           frame.width(), px, py, t);
  const auto alpha = map.apply(sprite.mask.values(), 3);
  std::vector<double> premul(sprite.image.values().size());
  for (std::size_t i = 0; i < premul.size(); ++i) premul[i] = sprite.mask.values()[i] * sprite.image.values()[i];
  const auto color = map.apply(premul, 3);
  std::vector<double> out = frame.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1 - alpha[i]) * out[i] + color[i] + alpha[i] * t.brightness;
  const ImageBuffer moved_mask = ImageBuffer::clamped(frame.height(), frame.width(), alpha);
  frame = ImageBuffer::clamped(frame.height(), frame.width(), out);
  const Box b = coverage_box(moved_mask);
  if (b.x_max <= b.x_min || b.area() < 12.0) return std::nullopt;
  return b;
}

/// Random paint (brightest channel at least 0.5) and window colors.
inline CarStyle random_car_style(Rng& rng) {
  CarStyle s;
  s.body = {rng.uniform(), rng.uniform(), rng.uniform()};
  s.body[rng.below(3)] = rng.uniform(0.5, 1.0);
  const double g = rng.uniform(0.35, 0.8);
  s.window = {g * 0.8, g * 0.9, std::min(1.0, g * 1.1)};
  s.view_deg = rng.uniform(-38.0, 38.0);
  return s;
}

struct SceneGenConfig {
  int height = 32;
  int width = 32;
  double car_probability = 0.7;
  double distractor_probability = 0.5;
  double min_scale = 0.6;
  double max_scale = 1.15;
};

/// Labeled scenes with seeded placements over random backgrounds.
inline std::vector<LabeledScene> detector_scenes(std::size_t count, std::uint64_t seed,
                                                 const SceneGenConfig& cfg = {}) {
  Rng rng(seed);
  std::vector<LabeledScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    LabeledScene scene{render_background(cfg.height, cfg.width, rng), {}};
    // Cars stay inside the frame; clutter may be cut off by the border.
    auto place = [&](const Sprite& sp, const std::string& label, bool inside) {
      PlacementTransform t;
      t.scale = rng.uniform(cfg.min_scale, cfg.max_scale);
      t.rotation_deg = rng.uniform(-8.0, 8.0);
      t.brightness = rng.uniform(-0.08, 0.08);
      const double margin = inside ? 7.5 * t.scale : -2.0;
      const double cx = rng.uniform(margin, cfg.width - margin);
      const double cy = rng.uniform(margin, cfg.height - margin);
      const double ox = cx - 0.5 * (kSpriteSize - 1), oy = cy - 0.5 * (kSpriteSize - 1);
      const int px = static_cast<int>(std::floor(ox)), py = static_cast<int>(std::floor(oy));
      t.shift_x = ox - px;
      t.shift_y = oy - py;
      if (auto box = stamp(scene.image, sp, px, py, t)) scene.objects.push_back({label, *box});
    };
    if (rng.uniform() < cfg.distractor_probability) {
      if (rng.below(2) == 0) {
        place(render_cone({rng.uniform(0.85, 1.0), rng.uniform(0.3, 0.6), rng.uniform(0.0, 0.15)}), "cone", false);
      } else {
        place(render_other(rng), "other", false);
      }
    }
    if (rng.uniform() < cfg.car_probability) place(render_car(random_car_style(rng)), "car", true);
    out.push_back(std::move(scene));
  }
  return out;
}

}  // namespace projforge::synth
