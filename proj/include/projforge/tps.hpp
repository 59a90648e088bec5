#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "projforge/error.hpp"
#include "projforge/image.hpp"

namespace projforge {

/// Corresponding points: projector plane (source) to captured image (target).
struct ControlPointSet {
  std::vector<Point2> source;
  std::vector<Point2> target;

  std::size_t size() const { return source.size(); }
};

/// Throws InputError naming the first violated condition.
inline void validate(const ControlPointSet& cps) {
  if (cps.source.size() != cps.target.size()) {
    throw InputError("control points: " + std::to_string(cps.source.size()) + " sources but " +
                     std::to_string(cps.target.size()) + " targets");
  }
  if (cps.size() < 4) {
    throw InputError("control points: need at least 4 pairs, got " + std::to_string(cps.size()));
  }
  for (std::size_t i = 0; i < cps.size(); ++i) {
    if (!is_finite(cps.source[i]) || !is_finite(cps.target[i])) {
      throw InputError("control points: pair " + std::to_string(i) + " is not finite");
    }
  }
  for (std::size_t i = 0; i < cps.size(); ++i) {
    for (std::size_t j = i + 1; j < cps.size(); ++j) {
      if (std::hypot(cps.source[i].x - cps.source[j].x, cps.source[i].y - cps.source[j].y) <= 1e-9) {
        throw InputError("control points: sources " + std::to_string(i) + " and " +
                         std::to_string(j) + " coincide");
      }
    }
  }
  Eigen::MatrixXd centered(cps.size(), 2);
  double cx = 0, cy = 0;
  for (const auto& p : cps.source) { cx += p.x; cy += p.y; }
  cx /= cps.size();
  cy /= cps.size();
  for (std::size_t i = 0; i < cps.size(); ++i) {
    centered(i, 0) = cps.source[i].x - cx;
    centered(i, 1) = cps.source[i].y - cy;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const auto sv = svd.singularValues();
  if (sv(0) == 0.0 || sv(1) / sv(0) < 1e-10) {
    throw InputError("control points: sources are collinear, affine part is undetermined");
  }
}

/// Thin-plate radial basis r^2 ln r, with the limit value 0 at r = 0.
inline double tps_kernel(double r) {
  if (r < 0.0 || std::isnan(r)) throw InputError("tps_kernel: negative distance");
  if (r == 0.0) return 0.0;
  return r * r * std::log(r);
}

/// f(p) + sum_i w_i phi(|p - c_i|), one coefficient set per output coordinate.
struct TpsModel {
  std::array<std::array<double, 3>, 2> affine{};  // [x|y][a0, a1, a2]
  std::array<std::vector<double>, 2> weights;
  std::vector<Point2> controls;
  double regularization = 0.0;
};

inline Point2 apply_tps(const TpsModel& model, Point2 p) {
  double out[2];
  for (int k = 0; k < 2; ++k) {
    out[k] = model.affine[k][0] + model.affine[k][1] * p.x + model.affine[k][2] * p.y;
  }
  for (std::size_t i = 0; i < model.controls.size(); ++i) {
    const double phi = tps_kernel(std::hypot(p.x - model.controls[i].x, p.y - model.controls[i].y));
    out[0] += model.weights[0][i] * phi;
    out[1] += model.weights[1][i] * phi;
  }
  return {out[0], out[1]};
}

/// Solves [[K + lambda I, P], [P^T, 0]] [w; a] = [t; 0] for both output
/// coordinates.
inline TpsModel fit_tps(const ControlPointSet& cps, double regularization) {
  validate(cps);
  if (!(regularization >= 0.0) || !std::isfinite(regularization)) {
    throw InputError("fit_tps: regularization must be a nonnegative finite value");
  }
  const int n = static_cast<int>(cps.size());
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(n + 3, n + 3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const auto& a = cps.source[i];
      const auto& b = cps.source[j];
      system(i, j) = tps_kernel(std::hypot(a.x - b.x, a.y - b.y));
    }
    system(i, i) += regularization;
    system(i, n) = 1.0;
    system(i, n + 1) = cps.source[i].x;
    system(i, n + 2) = cps.source[i].y;
    system(n, i) = 1.0;
    system(n + 1, i) = cps.source[i].x;
    system(n + 2, i) = cps.source[i].y;
  }
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
  for (int i = 0; i < n; ++i) {
    rhs(i, 0) = cps.target[i].x;
    rhs(i, 1) = cps.target[i].y;
  }

  const Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible()) {
    throw NumericalError("fit_tps: singular system (rank " + std::to_string(lu.rank()) + " of " +
                         std::to_string(n + 3) + "); control points are degenerate");
  }
  Eigen::MatrixXd sol = lu.solve(rhs);
  // One step of iterative refinement.
  const Eigen::MatrixXd residual = rhs - system * sol;
  sol += lu.solve(residual);
  if (!sol.allFinite()) throw NumericalError("fit_tps: non-finite solution");

  TpsModel model;
  model.controls = cps.source;
  model.regularization = regularization;
  for (int k = 0; k < 2; ++k) {
    model.weights[k].resize(n);
    for (int i = 0; i < n; ++i) model.weights[k][i] = sol(i, k);
    model.affine[k] = {sol(n, k), sol(n + 1, k), sol(n + 2, k)};
  }
  return model;
}

/// Forward model plus the separately fitted reverse (target -> source).
struct TpsTransform {
  TpsModel forward;
  std::optional<TpsModel> reverse;
};

inline TpsTransform fit_tps_transform(const ControlPointSet& cps, double regularization) {
  ControlPointSet swapped{cps.target, cps.source};
  return {fit_tps(cps, regularization), fit_tps(swapped, regularization)};
}

/// Sparse operator taking source pixels to output pixels: four bilinear
/// weights per output pixel.
using WarpOperator = PixelMap;

/// Pull warp: each output pixel center q samples the source at reverse(q).
inline WarpOperator build_warp_operator(const TpsTransform& tps, int src_height, int src_width,
                                        int out_height, int out_width) {
  if (!tps.reverse) throw InputError("warp: reverse TPS model unavailable");
  WarpOperator op(src_height, src_width, out_height, out_width);
  for (int y = 0; y < out_height; ++y) {
    for (int x = 0; x < out_width; ++x) {
      const Point2 p = apply_tps(*tps.reverse, {static_cast<double>(x), static_cast<double>(y)});
      op.set_taps(static_cast<std::size_t>(y) * out_width + x, bilinear_taps(src_height, src_width, p));
    }
  }
  return op;
}

inline std::pair<ImageBuffer, WarpOperator> warp_image(const TpsTransform& tps, const ImageBuffer& src,
                                                       int out_height, int out_width) {
  WarpOperator op = build_warp_operator(tps, src.height(), src.width(), out_height, out_width);
  ImageBuffer out = apply_pixel_map(op, src);
  return {std::move(out), std::move(op)};
}

/// The warped patch footprint (the blending mask) in target coordinates.
inline ImageBuffer warp_mask(const TpsTransform& tps, const ImageBuffer& patch_shape, int out_height,
                             int out_width) {
  for (std::size_t p = 0; p < patch_shape.pixel_count(); ++p) {
    const auto v = patch_shape.data().subspan(p * 3, 3);
    if (v[0] != v[1] || v[1] != v[2]) {
      throw InputError("warp_mask: patch shape channels must be equal");
    }
  }
  return warp_image(tps, patch_shape, out_height, out_width).first;
}

// ---------------------------------------------------------------------------
// Files

/// One pair per line: `sx sy tx ty`; `#` starts a comment.
inline ControlPointSet parse_control_points(std::istream& in, const std::string& origin) {
  ControlPointSet cps;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<double> values;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw InputError(origin + ":" + std::to_string(line_no) + ": malformed number '" + tok + "'");
      }
    }
    if (values.empty()) continue;
    if (values.size() != 4) {
      throw InputError(origin + ":" + std::to_string(line_no) + ": expected 4 values, got " +
                       std::to_string(values.size()));
    }
    cps.source.push_back({values[0], values[1]});
    cps.target.push_back({values[2], values[3]});
  }
  return cps;
}

inline ControlPointSet load_control_points(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing control point file '" + path.string() + "'");
  return parse_control_points(in, path.string());
}

inline void save_control_points(const ControlPointSet& cps, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "# sx sy tx ty\n";
  char buf[160];
  for (std::size_t i = 0; i < cps.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", cps.source[i].x, cps.source[i].y,
                  cps.target[i].x, cps.target[i].y);
    out << buf;
  }
}

namespace detail {

inline void write_tps_model(std::ostream& out, const TpsModel& m) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "regularization " << num(m.regularization) << "\n";
  out << "controls " << m.controls.size() << "\n";
  for (const auto& c : m.controls) out << num(c.x) << " " << num(c.y) << "\n";
  for (int k = 0; k < 2; ++k) {
    out << (k == 0 ? "affine_x" : "affine_y");
    for (double a : m.affine[k]) out << " " << num(a);
    out << "\n" << (k == 0 ? "weights_x" : "weights_y");
    for (double w : m.weights[k]) out << " " << num(w);
    out << "\n";
  }
}

inline TpsModel read_tps_model(std::istream& in, const std::string& origin) {
  auto expect = [&](const std::string& key) {
    std::string tok;
    if (!(in >> tok) || tok != key) throw InputError(origin + ": expected '" + key + "'");
  };
  auto read = [&](double& v) {
    if (!(in >> v)) throw InputError(origin + ": truncated model");
  };
  TpsModel m;
  expect("regularization");
  read(m.regularization);
  expect("controls");
  std::size_t n = 0;
  if (!(in >> n)) throw InputError(origin + ": bad control count");
  m.controls.resize(n);
  for (auto& c : m.controls) {
    read(c.x);
    read(c.y);
  }
  for (int k = 0; k < 2; ++k) {
    expect(k == 0 ? "affine_x" : "affine_y");
    for (double& a : m.affine[k]) read(a);
    expect(k == 0 ? "weights_x" : "weights_y");
    m.weights[k].resize(n);
    for (double& w : m.weights[k]) read(w);
  }
  return m;
}

}  // namespace detail

inline void save_tps_transform(const TpsTransform& tps, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "projforge-tps 1\nforward\n";
  detail::write_tps_model(out, tps.forward);
  if (tps.reverse) {
    out << "reverse\n";
    detail::write_tps_model(out, *tps.reverse);
  }
}

inline TpsTransform load_tps_transform(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing TPS model file '" + path.string() + "'");
  std::string magic, version, section;
  in >> magic >> version >> section;
  if (magic != "projforge-tps" || section != "forward") {
    throw InputError(path.string() + ": not a TPS model file");
  }
  TpsTransform tps;
  tps.forward = detail::read_tps_model(in, path.string());
  if (in >> section) {
    if (section != "reverse") throw InputError(path.string() + ": unexpected section '" + section + "'");
    tps.reverse = detail::read_tps_model(in, path.string());
  }
  return tps;
}

/// Largest distance between apply_tps(source_i) and target_i.
inline double max_control_error(const TpsModel& model, const ControlPointSet& cps) {
  double worst = 0.0;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const Point2 q = apply_tps(model, cps.source[i]);
    worst = std::max(worst, std::hypot(q.x - cps.target[i].x, q.y - cps.target[i].y));
  }
  return worst;
}

/// Largest |w_i| over both output coordinates.
inline double max_abs_weight(const TpsModel& model) {
  double worst = 0.0;
  for (const auto& ws : model.weights)
    for (double w : ws) worst = std::max(worst, std::abs(w));
  return worst;
}

}  // namespace projforge
