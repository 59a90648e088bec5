#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "projforge/attack.hpp"
#include "projforge/colormap.hpp"
#include "projforge/compositor.hpp"
#include "projforge/detector.hpp"
#include "projforge/error.hpp"
#include "projforge/image.hpp"
#include "projforge/parallel.hpp"
#include "projforge/rng.hpp"

namespace projforge {

/// Ordered frames sharing one condition. `labels[i]` says whether the target
/// is physically present in frame i; it is carried for bookkeeping and does
/// not enter the rate.
struct FrameSet {
  std::vector<ImageBuffer> frames;
  std::vector<bool> labels;
  std::string distance;
  std::string angle;
  std::string ambient;

  void validate() const {
    if (frames.empty()) throw InputError("frame set: no frames");
    if (labels.size() != frames.size()) {
      throw InputError("frame set: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(frames.size()) + " frames");
    }
  }
};

struct ConditionKey {
  std::string distance;
  std::string angle;
  std::string ambient;

  auto operator<=>(const ConditionKey&) const = default;
};

struct FrameCount {
  std::size_t total = 0;
  std::size_t misdetected = 0;
};

/// Frames with no target detection at or above the threshold, over all frames.
struct OmdrReport {
  std::size_t total = 0;
  std::size_t misdetected = 0;
  double omdr = 0.0;
  std::map<ConditionKey, FrameCount> breakdown;

  void merge(const OmdrReport& other) {
    total += other.total;
    misdetected += other.misdetected;
    omdr = total ? static_cast<double>(misdetected) / static_cast<double>(total) : 0.0;
    for (const auto& [key, count] : other.breakdown) {
      breakdown[key].total += count.total;
      breakdown[key].misdetected += count.misdetected;
    }
  }
};

inline OmdrReport compute_omdr(const FrameSet& frames, const DetectorModel& det, const DetectorThreshold& thr) {
  frames.validate();
  thr.validate();
  OmdrReport r;
  for (const auto& f : frames.frames) {
    ++r.total;
    if (!target_detected(det, f, thr)) ++r.misdetected;
  }
  r.omdr = static_cast<double>(r.misdetected) / static_cast<double>(r.total);
  r.breakdown[{frames.distance, frames.angle, frames.ambient}] = {r.total, r.misdetected};
  return r;
}

// ---------------------------------------------------------------------------
// Distance, angle and ambient sweep

struct SweepDistance {
  std::string label;
  double scale = 1.0;  // object scale standing in for range
};

struct SweepAmbient {
  std::string label;
  ColorModel model;
};

/// One viewing angle: the view (object, placement, projector model) and the
/// backgrounds its frames cycle through.
struct SweepView {
  std::string angle;
  AttackView view;
  std::vector<ImageBuffer> backgrounds;
};

struct SweepConfig {
  std::vector<SweepDistance> distances{{"1.5m", 1.0}, {"2.0m", 0.8}, {"2.5m", 0.6}};
  int frames_per_cell = 32;
  /// Frame-to-frame jitter, applied on top of the distance scale.
  TransformRange jitter{0.95, 1.05, 0.05, 4.0, 0.04, 0.01};
  std::uint64_t seed = 7;
  int threads = 1;

  void validate() const {
    if (distances.empty() || frames_per_cell < 1) {
      throw InputError("sweep: need at least one distance and one frame per cell");
    }
    for (const auto& d : distances) {
      if (!(d.scale > 0.0)) throw InputError("sweep: distance '" + d.label + "' needs a positive scale");
    }
    jitter.validate();
  }
};

struct SweepCell {
  std::string distance;
  std::string angle;
  std::string ambient;
  OmdrReport attack;
  OmdrReport benign;
};

struct SweepGrid {
  std::vector<SweepCell> cells;  // ambient-major, then distance, then angle

  double mean_attack() const {
    double s = 0.0;
    for (const auto& c : cells) s += c.attack.omdr;
    return cells.empty() ? 0.0 : s / cells.size();
  }
  double mean_benign() const {
    double s = 0.0;
    for (const auto& c : cells) s += c.benign.omdr;
    return cells.empty() ? 0.0 : s / cells.size();
  }
  double mean_attack(const std::string& ambient) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : cells)
      if (c.ambient == ambient) s += c.attack.omdr, ++n;
    return n ? s / n : 0.0;
  }
};

/// Renders every cell's frames with and without the patch and scores both.
/// Frame f of a cell uses background f mod count and a jitter drawn from a
/// stream keyed by the seed, the cell and f, so cells are independent.
inline SweepGrid run_sweep(const std::vector<SweepView>& views, const ImageBuffer& patch, const DetectorModel& det,
                           const std::vector<SweepAmbient>& ambients, const DetectorThreshold& thr,
                           const SweepConfig& cfg) {
  cfg.validate();
  thr.validate();
  if (views.empty() || ambients.empty()) throw InputError("sweep: need at least one view and one ambient model");
  for (const auto& v : views) {
    if (v.backgrounds.empty()) throw InputError("sweep: view '" + v.angle + "' has no backgrounds");
    for (const auto& b : v.backgrounds) validate(v.view.scene(b));
  }
  SweepGrid grid;
  for (const auto& a : ambients)
    for (const auto& d : cfg.distances)
      for (const auto& v : views) grid.cells.push_back({d.label, v.angle, a.label, {}, {}});

  const std::size_t nd = cfg.distances.size(), nv = views.size();
  parallel_for(grid.cells.size(), thread_budget(cfg.threads), [&](std::size_t index) {
    const SweepAmbient& amb = ambients[index / (nd * nv)];
    const SweepDistance& dist = cfg.distances[(index / nv) % nd];
    const SweepView& sv = views[index % nv];
    ProjectionOperands ops = sv.view.ops;
    ops.color = amb.model;
    const ImageBuffer attacked = project_patch(ops, sv.view.object_img, patch).image;
    FrameSet with{{}, {}, dist.label, sv.angle, amb.label};
    FrameSet without = with;
    for (int f = 0; f < cfg.frames_per_cell; ++f) {
      Rng rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * (index * 1000003ULL + static_cast<std::uint64_t>(f) + 1)));
      const ImageBuffer& bg = sv.backgrounds[static_cast<std::size_t>(f) % sv.backgrounds.size()];
      PlacementTransform t = cfg.jitter.sample(rng, bg.height(), bg.width());
      t.scale *= dist.scale;
      const PlacementPlan plan = plan_placement(sv.view.scene(bg), t);
      with.frames.push_back(render_placement(plan, attacked));
      without.frames.push_back(render_placement(plan, sv.view.object_img));
      with.labels.push_back(true);
      without.labels.push_back(true);
    }
    grid.cells[index].attack = compute_omdr(with, det, thr);
    grid.cells[index].benign = compute_omdr(without, det, thr);
  });
  return grid;
}

inline SweepGrid run_sweep(const std::vector<SweepView>& views, const PatchParams& patch, const DetectorModel& det,
                           const std::vector<SweepAmbient>& ambients, const DetectorThreshold& thr,
                           const SweepConfig& cfg) {
  return run_sweep(views, patch_delta(patch), det, ambients, thr, cfg);
}

// ---------------------------------------------------------------------------
// Report

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// Distance rows by angle columns; fill encodes the attack rate, text shows
/// both rates.
inline std::string heatmap_svg(const SweepGrid& grid, const std::string& ambient) {
  std::vector<std::string> rows, cols;
  for (const auto& c : grid.cells) {
    if (c.ambient != ambient) continue;
    if (std::find(rows.begin(), rows.end(), c.distance) == rows.end()) rows.push_back(c.distance);
    if (std::find(cols.begin(), cols.end(), c.angle) == cols.end()) cols.push_back(c.angle);
  }
  constexpr int kCellW = 96, kCellH = 48, kLeft = 64, kTop = 40;
  const int width = kLeft + kCellW * static_cast<int>(cols.size()) + 8;
  const int height = kTop + kCellH * static_cast<int>(rows.size()) + 8;
  std::string svg;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n",
                width, height);
  svg += buf;
  svg += "<text x=\"4\" y=\"14\" font-size=\"13\">OMDR, ambient " + xml_escape(ambient) +
         " (A: with patch, B: without)</text>\n";
  for (std::size_t j = 0; j < cols.size(); ++j) {
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>\n",
                  kLeft + kCellW * static_cast<int>(j) + kCellW / 2, kTop - 6, xml_escape(cols[j]).c_str());
    svg += buf;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "<text x=\"4\" y=\"%d\">%s</text>\n",
                  kTop + kCellH * static_cast<int>(i) + kCellH / 2 + 4, xml_escape(rows[i]).c_str());
    svg += buf;
  }
  for (const auto& c : grid.cells) {
    if (c.ambient != ambient) continue;
    const int i = static_cast<int>(std::find(rows.begin(), rows.end(), c.distance) - rows.begin());
    const int j = static_cast<int>(std::find(cols.begin(), cols.end(), c.angle) - cols.begin());
    const int shade = static_cast<int>(std::lround(255.0 * (1.0 - c.attack.omdr)));
    const int x = kLeft + kCellW * j, y = kTop + kCellH * i;
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(255,%d,%d)\" stroke=\"#444\"/>\n"
                  "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">A %.4f</text>\n"
                  "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">B %.4f</text>\n",
                  x, y, kCellW, kCellH, shade, shade, x + kCellW / 2, y + 20, c.attack.omdr, x + kCellW / 2, y + 36,
                  c.benign.omdr);
    svg += buf;
  }
  svg += "</svg>\n";
  return svg;
}

/// Ambient label reduced to characters safe in a file name.
inline std::string file_label(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '_') c = '_';
  }
  return out;
}

/// Writes `sweep.csv` and `heatmap_<ambient>.svg` per ambient label.
inline void emit_report(const SweepGrid& grid, const std::filesystem::path& out_dir) {
  if (grid.cells.empty()) throw InputError("emit_report: empty grid");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::ofstream csv(out_dir / "sweep.csv");
  if (!csv) throw InputError("cannot write '" + (out_dir / "sweep.csv").string() + "'");
  csv << "distance,angle,ambient,omdr_attack,omdr_benign\n";
  char buf[64];
  std::vector<std::string> ambients;
  for (const auto& c : grid.cells) {
    std::snprintf(buf, sizeof buf, ",%.4f,%.4f\n", c.attack.omdr, c.benign.omdr);
    csv << c.distance << ',' << c.angle << ',' << c.ambient << buf;
    if (std::find(ambients.begin(), ambients.end(), c.ambient) == ambients.end()) ambients.push_back(c.ambient);
  }
  if (!csv) throw InputError("failed writing sweep.csv");
  for (const auto& a : ambients) {
    std::ofstream svg(out_dir / ("heatmap_" + file_label(a) + ".svg"));
    if (!svg) throw InputError("cannot write heatmap for ambient '" + a + "'");
    svg << heatmap_svg(grid, a);
  }
}

}  // namespace projforge
