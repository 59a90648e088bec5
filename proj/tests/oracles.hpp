#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "projforge/colormap.hpp"
#include "projforge/compositor.hpp"
#include "projforge/tps.hpp"

/// Independent reference computations shared by the unit and acceptance tests.
namespace projforge::oracle {

/// Bilinear read written out longhand; a pull outside the pixel-center hull reads 0.
inline double pull(const ImageBuffer& img, double px, double py, int c) {
  if (px < 0 || py < 0 || px > img.width() - 1 || py > img.height() - 1) return 0.0;
  const int x0 = static_cast<int>(std::floor(px)), y0 = static_cast<int>(std::floor(py));
  const double fx = px - x0, fy = py - y0;
  double s = 0.0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const int x = x0 + dx, y = y0 + dy;
      if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
      s += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * img.at(y, x, c);
    }
  return s;
}

/// Straight-line evaluation of (1 - M) x + clamp(color(M x, warp(delta))) M, pixel by pixel.
inline ImageBuffer projection(const ProjectionOperands& ops, const ImageBuffer& x, const ImageBuffer& delta) {
  std::vector<double> out(x.values().size());
  for (int y = 0; y < x.height(); ++y)
    for (int xx = 0; xx < x.width(); ++xx) {
      const Point2 p = apply_tps(*ops.tps.reverse, {double(xx), double(y)});
      Rgb m{}, gated{}, proj{};
      for (int c = 0; c < 3; ++c) {
        m[c] = pull(ops.patch_shape, p.x, p.y, c);
        gated[c] = m[c] * x.at(y, xx, c);
        proj[c] = pull(delta, p.x, p.y, c);
      }
      const Rgb pred = predict_color(ops.color, gated, proj);
      for (int c = 0; c < 3; ++c) {
        const std::size_t i = (static_cast<std::size_t>(y) * x.width() + xx) * 3 + c;
        out[i] = (1.0 - m[c]) * x.at(y, xx, c) + std::clamp(pred[c], 0.0, 1.0) * m[c];
      }
    }
  return ImageBuffer::clamped(x.height(), x.width(), out);
}

/// Mean L1 on `test` of the per-channel training median, the best constant under L1.
inline double constant_predictor_l1(const ColorDataset& train, const ColorDataset& test) {
  Rgb median{};
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v;
    for (const auto& s : train.samples) v.push_back(s.observed[c]);
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    median[c] = v[v.size() / 2];
  }
  double s = 0.0;
  for (const auto& smp : test.samples)
    for (int c = 0; c < 3; ++c) s += std::abs(smp.observed[c] - median[c]);
  return test.samples.empty() ? 0.0 : s / test.samples.size();
}

}  // namespace projforge::oracle
