#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "projforge/error.hpp"

namespace projforge {

using Rgb = std::array<double, 3>;

/// Real-valued image coordinate. Origin at the top-left pixel center,
/// x to the right, y downward.
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline bool is_finite(const Point2& p) { return std::isfinite(p.x) && std::isfinite(p.y); }

/// H x W x 3 image, row-major, channel-interleaved, values in [0, 1].
class ImageBuffer {
 public:
  static constexpr int kChannels = 3;

  /// 0 x 0 placeholder, assigned before use.
  ImageBuffer() : height_(0), width_(0) {}

  ImageBuffer(int height, int width, double fill = 0.0)
      : height_(height), width_(width) {
    check_dims(height, width);
    check_value(fill);
    data_.assign(static_cast<std::size_t>(height) * width * kChannels, fill);
  }

  ImageBuffer(int height, int width, std::vector<double> data)
      : height_(height), width_(width), data_(std::move(data)) {
    check_dims(height, width);
    if (data_.size() != static_cast<std::size_t>(height) * width * kChannels) {
      throw InputError("ImageBuffer: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(height) + "x" +
                       std::to_string(width) + "x3");
    }
    for (double v : data_) check_value(v);
  }

  /// Build from arbitrary reals, clamping into [0, 1]. NaN is rejected.
  static ImageBuffer clamped(int height, int width, std::span<const double> values) {
    std::vector<double> data(values.begin(), values.end());
    for (double& v : data) {
      if (std::isnan(v)) throw NumericalError("ImageBuffer: NaN value");
      v = std::clamp(v, 0.0, 1.0);
    }
    return ImageBuffer(height, width, std::move(data));
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height_) * width_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  Rgb pixel(int y, int x) const {
    const std::size_t i = index(y, x);
    return {data_[i], data_[i + 1], data_[i + 2]};
  }

  void set(int y, int x, int c, double v) {
    check_value(v);
    data_[index(y, x, c)] = v;
  }

  void set_pixel(int y, int x, const Rgb& rgb) {
    for (int c = 0; c < kChannels; ++c) set(y, x, c, rgb[c]);
  }

  bool same_shape(const ImageBuffer& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  static void check_dims(int height, int width) {
    if (height < 1 || width < 1) {
      throw InputError("ImageBuffer: dimensions must be positive, got " +
                       std::to_string(height) + "x" + std::to_string(width));
    }
  }
  static void check_value(double v) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InputError("ImageBuffer: value " + std::to_string(v) + " outside [0,1]");
    }
  }

  int height_;
  int width_;
  std::vector<double> data_;
};

/// Four bilinear taps. Taps are pixel indices (y * width + x); unused taps
/// carry weight 0. An out-of-bounds pull has all weights 0.
struct BilinearTaps {
  std::array<std::int32_t, 4> pixel{0, 0, 0, 0};
  std::array<double, 4> weight{0.0, 0.0, 0.0, 0.0};
  bool in_bounds = false;
};

inline BilinearTaps bilinear_taps(int height, int width, Point2 p) {
  BilinearTaps taps;
  if (!(p.x >= 0.0 && p.y >= 0.0 && p.x <= width - 1 && p.y <= height - 1)) return taps;
  const int x0 = std::min(static_cast<int>(std::floor(p.x)), width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(p.y)), height - 1);
  const int x1 = std::min(x0 + 1, width - 1);
  const int y1 = std::min(y0 + 1, height - 1);
  const double fx = p.x - x0;
  const double fy = p.y - y0;
  taps.pixel = {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1};
  taps.weight = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  taps.in_bounds = true;
  return taps;
}

/// Bilinear sample of a raw H x W x C array. Values are not range-checked,
/// so this also serves algebraic uses outside [0, 1].
inline std::vector<double> sample_bilinear(std::span<const double> hwc, int height, int width,
                                           int channels, Point2 p,
                                           std::span<const double> fill = {}) {
  std::vector<double> out(static_cast<std::size_t>(channels), 0.0);
  const BilinearTaps taps = bilinear_taps(height, width, p);
  if (!taps.in_bounds) {
    for (int c = 0; c < channels && static_cast<std::size_t>(c) < fill.size(); ++c) out[c] = fill[c];
    return out;
  }
  for (int k = 0; k < 4; ++k) {
    if (taps.weight[k] == 0.0) continue;
    const std::size_t base = static_cast<std::size_t>(taps.pixel[k]) * channels;
    for (int c = 0; c < channels; ++c) out[c] += taps.weight[k] * hwc[base + c];
  }
  return out;
}

inline Rgb sample_bilinear(const ImageBuffer& img, Point2 p, const Rgb& fill = {0.0, 0.0, 0.0}) {
  const auto v = sample_bilinear(img.data(), img.height(), img.width(), ImageBuffer::kChannels, p, fill);
  return {v[0], v[1], v[2]};
}

/// Sparse linear map between pixel grids with at most four taps per output
/// pixel, applied identically to every channel. Warps, block upsampling and
/// scene placement are all expressed this way so that differentiation only
/// ever needs the transpose.
class PixelMap {
 public:
  struct Row {
    std::array<std::int32_t, 4> col{0, 0, 0, 0};
    std::array<double, 4> weight{0.0, 0.0, 0.0, 0.0};
  };

  PixelMap() = default;
  PixelMap(int in_height, int in_width, int out_height, int out_width)
      : in_height_(in_height), in_width_(in_width), out_height_(out_height), out_width_(out_width),
        rows_(static_cast<std::size_t>(out_height) * out_width) {}

  int in_height() const { return in_height_; }
  int in_width() const { return in_width_; }
  int out_height() const { return out_height_; }
  int out_width() const { return out_width_; }
  std::size_t in_pixels() const { return static_cast<std::size_t>(in_height_) * in_width_; }
  std::size_t out_pixels() const { return rows_.size(); }

  Row& row(std::size_t out_pixel) { return rows_[out_pixel]; }
  const Row& row(std::size_t out_pixel) const { return rows_[out_pixel]; }
  const std::vector<Row>& rows() const { return rows_; }

  void set_taps(std::size_t out_pixel, const BilinearTaps& taps) {
    Row& r = rows_[out_pixel];
    r.col = taps.pixel;
    r.weight = taps.weight;
  }

  /// out[p, c] = sum_k w[p][k] * in[col[p][k], c]
  std::vector<double> apply(std::span<const double> in, int channels) const {
    check_size(in.size(), in_pixels(), channels, "apply");
    std::vector<double> out(out_pixels() * channels, 0.0);
    for (std::size_t p = 0; p < rows_.size(); ++p) {
      const Row& r = rows_[p];
      double* dst = out.data() + p * channels;
      for (int k = 0; k < 4; ++k) {
        const double w = r.weight[k];
        if (w == 0.0) continue;
        const double* src = in.data() + static_cast<std::size_t>(r.col[k]) * channels;
        for (int c = 0; c < channels; ++c) dst[c] += w * src[c];
      }
    }
    return out;
  }

  /// Accumulates the transpose product into `in_grad`.
  void apply_transpose_add(std::span<const double> out_grad, std::span<double> in_grad,
                           int channels) const {
    check_size(out_grad.size(), out_pixels(), channels, "apply_transpose");
    check_size(in_grad.size(), in_pixels(), channels, "apply_transpose");
    for (std::size_t p = 0; p < rows_.size(); ++p) {
      const Row& r = rows_[p];
      const double* g = out_grad.data() + p * channels;
      for (int k = 0; k < 4; ++k) {
        const double w = r.weight[k];
        if (w == 0.0) continue;
        double* dst = in_grad.data() + static_cast<std::size_t>(r.col[k]) * channels;
        for (int c = 0; c < channels; ++c) dst[c] += w * g[c];
      }
    }
  }

 private:
  static void check_size(std::size_t got, std::size_t pixels, int channels, const char* what) {
    if (got != pixels * static_cast<std::size_t>(channels)) {
      throw InputError(std::string("PixelMap::") + what + ": size mismatch");
    }
  }

  int in_height_ = 0;
  int in_width_ = 0;
  int out_height_ = 0;
  int out_width_ = 0;
  std::vector<Row> rows_;
};

/// Apply a PixelMap to an image. Every row's weights are nonnegative and sum
/// to at most one, so the result stays in [0, 1].
inline ImageBuffer apply_pixel_map(const PixelMap& map, const ImageBuffer& img) {
  if (map.in_height() != img.height() || map.in_width() != img.width()) {
    throw InputError("apply_pixel_map: image does not match operator input shape");
  }
  return ImageBuffer::clamped(map.out_height(), map.out_width(),
                              map.apply(img.data(), ImageBuffer::kChannels));
}

}  // namespace projforge
