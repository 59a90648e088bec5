#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "projforge/autodiff.hpp"
#include "projforge/error.hpp"
#include "projforge/image.hpp"
#include "projforge/image_io.hpp"
#include "projforge/optim.hpp"
#include "projforge/rng.hpp"

namespace projforge {

/// Axis-aligned box in pixel coordinates.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double area() const { return std::max(0.0, x_max - x_min) * std::max(0.0, y_max - y_min); }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

/// One candidate box. `label` and `score` are set for reported detections:
/// score = objectness * class_scores[label].
struct Detection {
  Box box;
  std::vector<double> class_scores;
  double objectness = 0.0;
  int label = -1;
  double score = 0.0;
};

struct DetectorThreshold {
  double threshold = 0.6;
  std::string target_class = "car";

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) {
      throw InputError("detector threshold must lie in (0,1), got " + std::to_string(threshold));
    }
  }
};

/// A differentiable detector. Implementations must be immutable after
/// construction so that all calls are safe from concurrent threads.
class DetectorModel {
 public:
  virtual ~DetectorModel() = default;

  virtual const std::vector<std::string>& labels() const = 0;
  /// Input height and width must be multiples of this.
  virtual int stride() const = 0;
  /// Every candidate before suppression, in a fixed order.
  virtual std::vector<Detection> raw_detections(const ImageBuffer& img) const = 0;
  /// Records the sum over raw candidates of objectness * score(class) for an
  /// [H, W, 3] image node.
  virtual ad::Var record_detection_loss(ad::Tape& tape, ad::Var image, int class_index) const = 0;

  int class_index(const std::string& label) const {
    const auto& ls = labels();
    const auto it = std::find(ls.begin(), ls.end(), label);
    if (it == ls.end()) throw InputError("unknown class label '" + label + "'");
    return static_cast<int>(it - ls.begin());
  }

  void check_input(int height, int width) const {
    if (height % stride() != 0 || width % stride() != 0) {
      throw InputError("detector: image " + std::to_string(width) + "x" + std::to_string(height) +
                       " is not a multiple of the stride " + std::to_string(stride()));
    }
  }
};

/// Greedy suppression of same-label boxes, highest score first. Ties keep
/// the earlier candidate.
inline std::vector<Detection> non_max_suppression(std::vector<Detection> cands, double iou_limit) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (auto& c : cands) {
    const bool clash = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.label == c.label && iou(k.box, c.box) > iou_limit;
    });
    if (!clash) kept.push_back(std::move(c));
  }
  return kept;
}

/// Per-class candidates scoring at least `min_score`, suppressed at IoU 0.5.
inline std::vector<Detection> detect(const DetectorModel& det, const ImageBuffer& img,
                                     double min_score = 0.05) {
  const auto raw = det.raw_detections(img);
  std::vector<Detection> cands;
  for (const auto& r : raw) {
    for (std::size_t k = 0; k < r.class_scores.size(); ++k) {
      const double s = r.objectness * r.class_scores[k];
      if (s < min_score) continue;
      Detection d = r;
      d.label = static_cast<int>(k);
      d.score = s;
      cands.push_back(std::move(d));
    }
  }
  return non_max_suppression(std::move(cands), 0.5);
}

/// True when some reported detection of the target class reaches the threshold.
inline bool target_detected(const DetectorModel& det, const ImageBuffer& img,
                            const DetectorThreshold& thr) {
  thr.validate();
  const int target = det.class_index(thr.target_class);
  const auto found = detect(det, img, std::min(0.05, thr.threshold));
  return std::any_of(found.begin(), found.end(), [&](const Detection& d) {
    return d.label == target && d.score >= thr.threshold;
  });
}

/// The detection loss on its own tape, differentiable with respect to the image.
struct DetectionLossGraph {
  ad::Tape tape;
  ad::Var image;
  ad::Var loss;
};

inline DetectionLossGraph detection_loss_graph(const DetectorModel& det, const ImageBuffer& img,
                                               const std::string& target_class) {
  const int k = det.class_index(target_class);
  det.check_input(img.height(), img.width());
  DetectionLossGraph g;
  g.image = g.tape.variable({img.height(), img.width(), 3}, img.values());
  g.loss = det.record_detection_loss(g.tape, g.image, k);
  return g;
}

inline double detection_loss(const DetectorModel& det, const ImageBuffer& img,
                             const std::string& target_class) {
  const auto g = detection_loss_graph(det, img, target_class);
  return g.tape.scalar(g.loss);
}

// ---------------------------------------------------------------------------
// Toy grid detector

struct ToyDetectorArch {
  std::array<int, 3> channels{16, 32, 32};

  friend bool operator==(const ToyDetectorArch&, const ToyDetectorArch&) = default;
};

/// Three 3x3 stride-2 convolutions with rectifiers, then a 3x3 head over the
/// grid giving per cell: objectness, one score per label, and box terms
/// tx ty tw th.
class ToyDetector final : public DetectorModel {
 public:
  static constexpr int kKernel = 3;
  static constexpr int kStride = 8;
  static constexpr int kBoxTerms = 4;

  explicit ToyDetector(ToyDetectorArch arch = {}, std::uint64_t seed = 0)
      : arch_(arch), seed_(seed), labels_{"car", "cone", "other"} {
    for (int c : arch_.channels) {
      if (c < 1) throw InputError("ToyDetector: stage widths must be positive");
    }
    std::size_t off = 0;
    for (int s = 0; s < 4; ++s) {
      const auto [co, k, ci] = layer_dims(s);
      layout_[s] = {off, static_cast<std::size_t>(co) * k * k * ci, 0};
      off += layout_[s].weight_count;
      layout_[s].bias_offset = off;
      off += co;
    }
    params_.assign(off, 0.0);
  }

  /// He-uniform weights, zero biases.
  static ToyDetector initialized(ToyDetectorArch arch, std::uint64_t seed) {
    ToyDetector d(arch, seed);
    Rng rng(seed);
    for (int s = 0; s < 4; ++s) {
      const auto [co, k, ci] = d.layer_dims(s);
      const double bound = std::sqrt(6.0 / (k * k * ci));
      for (double& v : d.weights(s)) v = rng.uniform(-bound, bound);
    }
    return d;
  }

  int head_channels() const { return 1 + static_cast<int>(labels_.size()) + kBoxTerms; }
  const ToyDetectorArch& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::string>& labels() const override { return labels_; }
  int stride() const override { return kStride; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  /// Layer 0..2 are the stages, 3 is the head.
  std::span<double> weights(int layer) {
    return std::span(params_).subspan(layout_.at(layer).weight_offset, layout_[layer].weight_count);
  }
  std::span<double> biases(int layer) {
    return std::span(params_).subspan(layout_.at(layer).bias_offset, std::get<0>(layer_dims(layer)));
  }
  std::span<const double> weights(int layer) const {
    return std::span(params_).subspan(layout_.at(layer).weight_offset, layout_[layer].weight_count);
  }
  std::span<const double> biases(int layer) const {
    return std::span(params_).subspan(layout_.at(layer).bias_offset, std::get<0>(layer_dims(layer)));
  }

  /// [out, kernel, in] of a layer.
  std::tuple<int, int, int> layer_dims(int layer) const {
    switch (layer) {
      case 0: return {arch_.channels[0], kKernel, 3};
      case 1: return {arch_.channels[1], kKernel, arch_.channels[0]};
      case 2: return {arch_.channels[2], kKernel, arch_.channels[1]};
      case 3: return {head_channels(), kKernel, arch_.channels[2]};
      default: throw InputError("ToyDetector: no layer " + std::to_string(layer));
    }
  }

  struct Vars {
    std::array<ad::Var, 4> w;
    std::array<ad::Var, 4> b;
  };

  Vars bind(ad::Tape& tape, bool watched) const {
    Vars v;
    for (int s = 0; s < 4; ++s) {
      const auto [co, k, ci] = layer_dims(s);
      auto w = weights(s);
      auto b = biases(s);
      std::vector<double> wv(w.begin(), w.end()), bv(b.begin(), b.end());
      v.w[s] = watched ? tape.variable({co, k, k, ci}, std::move(wv))
                       : tape.constant({co, k, k, ci}, std::move(wv));
      v.b[s] = watched ? tape.variable({co}, std::move(bv)) : tape.constant({co}, std::move(bv));
    }
    return v;
  }

  /// [H, W, 3] -> raw head [H/8, W/8, head_channels]. Inputs are centered
  /// on 0.5 before the first stage.
  ad::Var record_head(ad::Tape& tape, const Vars& v, ad::Var image) const {
    const auto& s = tape.shape(image);
    if (s.size() != 3 || s[2] != 3) throw InputError("ToyDetector: expected an [H,W,3] image");
    check_input(s[0], s[1]);
    ad::Var h = tape.affine(image, 1.0, -0.5);
    for (int st = 0; st < 3; ++st) h = tape.relu(tape.conv2d(h, v.w[st], v.b[st], 2, 1));
    return tape.conv2d(h, v.w[3], v.b[3], 1, 1);
  }

  ad::Var record_detection_loss(ad::Tape& tape, ad::Var image, int class_index) const override {
    if (class_index < 0 || class_index >= static_cast<int>(labels_.size())) {
      throw InputError("ToyDetector: class index out of range");
    }
    const Vars v = bind(tape, false);
    ad::Var head = record_head(tape, v, image);
    const auto& hs = tape.shape(head);
    ad::Var rows = tape.reshape(head, {hs[0] * hs[1], hs[2]});
    ad::Var obj = tape.sigmoid(tape.slice(rows, 0, 1));
    ad::Var cls = tape.sigmoid(tape.slice(rows, 1 + class_index, 1));
    return tape.sum(tape.mul(obj, cls));
  }

  std::vector<Detection> raw_detections(const ImageBuffer& img) const override {
    ad::Tape tape;
    const Vars v = bind(tape, false);
    ad::Var head = record_head(tape, v, tape.constant({img.height(), img.width(), 3}, img.values()));
    return decode(tape.value(head), tape.shape(head));
  }

  /// Cell (r, c) with raw head values h: center ((c + s(tx)) * 8, (r + s(ty)) * 8),
  /// size 8 exp(tw) by 8 exp(th), exponents clipped to [-3, 3].
  std::vector<Detection> decode(const std::vector<double>& head, const ad::Shape& shape) const {
    const int gh = shape[0], gw = shape[1], hc = shape[2];
    const int nl = static_cast<int>(labels_.size());
    std::vector<Detection> out;
    out.reserve(static_cast<std::size_t>(gh) * gw);
    for (int r = 0; r < gh; ++r) {
      for (int c = 0; c < gw; ++c) {
        const double* h = head.data() + (static_cast<std::size_t>(r) * gw + c) * hc;
        Detection d;
        d.objectness = ad::sigmoid(h[0]);
        for (int k = 0; k < nl; ++k) d.class_scores.push_back(ad::sigmoid(h[1 + k]));
        const double cx = (c + ad::sigmoid(h[1 + nl])) * kStride;
        const double cy = (r + ad::sigmoid(h[2 + nl])) * kStride;
        const double w = kStride * std::exp(std::clamp(h[3 + nl], -3.0, 3.0));
        const double hh = kStride * std::exp(std::clamp(h[4 + nl], -3.0, 3.0));
        d.box = {cx - 0.5 * w, cy - 0.5 * hh, cx + 0.5 * w, cy + 0.5 * hh};
        out.push_back(std::move(d));
      }
    }
    return out;
  }

  friend bool operator==(const ToyDetector& a, const ToyDetector& b) {
    return a.arch_ == b.arch_ && a.seed_ == b.seed_ && a.labels_ == b.labels_ && a.params_ == b.params_;
  }

 private:
  struct Block {
    std::size_t weight_offset = 0;
    std::size_t weight_count = 0;
    std::size_t bias_offset = 0;
  };

  ToyDetectorArch arch_;
  std::uint64_t seed_;
  std::vector<std::string> labels_;
  std::array<Block, 4> layout_{};
  std::vector<double> params_;
};

// ---------------------------------------------------------------------------
// Labeled scenes and training

struct Annotation {
  std::string label;
  Box box;
};

struct LabeledScene {
  ImageBuffer image;
  std::vector<Annotation> objects;
};

inline bool contains_label(const LabeledScene& s, const std::string& label) {
  return std::any_of(s.objects.begin(), s.objects.end(),
                     [&](const Annotation& a) { return a.label == label; });
}

/// Sidecar lines: `class x_min y_min x_max y_max`.
inline std::vector<Annotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing annotation file '" + path.string() + "'");
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    Annotation a;
    if (!(fields >> a.label)) continue;
    std::string extra;
    if (!(fields >> a.box.x_min >> a.box.y_min >> a.box.x_max >> a.box.y_max) || (fields >> extra) ||
        !(a.box.x_min < a.box.x_max && a.box.y_min < a.box.y_max)) {
      throw InputError(path.string() + ":" + std::to_string(line_no) +
                       ": expected `class x_min y_min x_max y_max` with a nonempty box");
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_annotations(const std::vector<Annotation>& objs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  char buf[160];
  for (const auto& a : objs) {
    std::snprintf(buf, sizeof buf, "%s %.6f %.6f %.6f %.6f\n", a.label.c_str(), a.box.x_min,
                  a.box.y_min, a.box.x_max, a.box.y_max);
    out << buf;
  }
}

/// Every `*.ppm` in the directory with its `.txt` sidecar, in name order.
inline std::vector<LabeledScene> load_labeled_scenes(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw InputError("dataset directory '" + dir.string() + "' does not exist");
  }
  std::vector<std::filesystem::path> images;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".ppm") images.push_back(e.path());
  }
  std::sort(images.begin(), images.end());
  std::vector<LabeledScene> out;
  for (const auto& p : images) {
    auto sidecar = p;
    sidecar.replace_extension(".txt");
    out.push_back({load_image(p), load_annotations(sidecar)});
  }
  return out;
}

inline void save_labeled_scenes(const std::vector<LabeledScene>& scenes,
                                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::snprintf(name, sizeof name, "scene_%04zu", i);
    save_image(scenes[i].image, dir / (std::string(name) + ".ppm"));
    save_annotations(scenes[i].objects, dir / (std::string(name) + ".txt"));
  }
}

struct DetectorTrainConfig {
  ToyDetectorArch arch;
  int epochs = 600;
  double step_size = 0.01;
  int batch_size = 16;
  double box_weight = 1.0;
  double label_smoothing = 0.0;  // positive objectness and class targets are 1 - this
  bool augment = true;  // flips, channel permutations, shifts of up to 4 px
  std::uint64_t seed = 7;
};

struct DetectorTrainResult {
  ToyDetector detector;
  double final_loss = 0.0;           // mean per-scene loss after training
  std::vector<double> epoch_losses;  // mean minibatch loss per epoch
};

namespace detail {

/// Per-cell targets of one scene: the cell holding a box center is positive
/// with target `1 - smoothing`; other cells whose centers fall inside a box
/// are left out of the objectness term.
struct CellTargets {
  ad::Constant obj, obj_weight, cls, cls_weight, box, box_weight;
};

inline CellTargets cell_targets(const ToyDetector& det, const LabeledScene& scene, double smoothing = 0.0) {
  const int gh = scene.image.height() / ToyDetector::kStride;
  const int gw = scene.image.width() / ToyDetector::kStride;
  const int nl = static_cast<int>(det.labels().size());
  const std::size_t cells = static_cast<std::size_t>(gh) * gw;
  std::vector<double> obj(cells, 0.0), objw(cells, 1.0), cls(cells * nl, 0.0), clsw(cells * nl, 0.0),
      box(cells * 4, 0.0), boxw(cells * 4, 0.0);
  for (const auto& a : scene.objects) {
    for (int r = 0; r < gh; ++r)
      for (int c = 0; c < gw; ++c) {
        const double px = (c + 0.5) * ToyDetector::kStride, py = (r + 0.5) * ToyDetector::kStride;
        if (px > a.box.x_min && px < a.box.x_max && py > a.box.y_min && py < a.box.y_max) {
          objw[static_cast<std::size_t>(r) * gw + c] = 0.0;
        }
      }
  }
  for (const auto& a : scene.objects) {
    const int k = det.class_index(a.label);
    const double cx = 0.5 * (a.box.x_min + a.box.x_max) / ToyDetector::kStride;
    const double cy = 0.5 * (a.box.y_min + a.box.y_max) / ToyDetector::kStride;
    const int c = std::clamp(static_cast<int>(std::floor(cx)), 0, gw - 1);
    const int r = std::clamp(static_cast<int>(std::floor(cy)), 0, gh - 1);
    const std::size_t cell = static_cast<std::size_t>(r) * gw + c;
    obj[cell] = 1.0 - smoothing;
    objw[cell] = 1.0;
    for (int j = 0; j < nl; ++j) {
      cls[cell * nl + j] = j == k ? 1.0 - smoothing : 0.0;
      clsw[cell * nl + j] = 1.0;
    }
    const double w = a.box.x_max - a.box.x_min, h = a.box.y_max - a.box.y_min;
    const double t[4] = {std::clamp(cx - c, 0.0, 1.0), std::clamp(cy - r, 0.0, 1.0),
                         std::log(w / ToyDetector::kStride), std::log(h / ToyDetector::kStride)};
    for (int j = 0; j < 4; ++j) {
      box[cell * 4 + j] = t[j];
      boxw[cell * 4 + j] = 1.0;
    }
  }
  return {ad::make_constant(std::move(obj)), ad::make_constant(std::move(objw)),
          ad::make_constant(std::move(cls)), ad::make_constant(std::move(clsw)),
          ad::make_constant(std::move(box)), ad::make_constant(std::move(boxw))};
}

/// Objectness and class cross-entropy plus weighted squared box error.
/// Box centers are compared after the sigmoid, sizes in log space.
inline ad::Var record_training_loss(ad::Tape& tape, const ToyDetector& det,
                                    const ToyDetector::Vars& vars, const LabeledScene& scene,
                                    double box_weight, double smoothing = 0.0) {
  const CellTargets t = cell_targets(det, scene, smoothing);
  const int nl = static_cast<int>(det.labels().size());
  ad::Var head = det.record_head(
      tape, vars, tape.constant({scene.image.height(), scene.image.width(), 3}, scene.image.values()));
  const auto& hs = tape.shape(head);
  ad::Var rows = tape.reshape(head, {hs[0] * hs[1], hs[2]});
  ad::Var obj = tape.bce_with_logits(tape.slice(rows, 0, 1), t.obj, t.obj_weight);
  ad::Var cls = tape.bce_with_logits(tape.slice(rows, 1, nl), t.cls, t.cls_weight);
  ad::Var centers = tape.sigmoid(tape.slice(rows, 1 + nl, 2));
  ad::Var sizes = tape.slice(rows, 3 + nl, 2);
  ad::Var box = tape.squared_error(tape.concat(centers, sizes), t.box, t.box_weight);
  return tape.add(tape.add(obj, cls), tape.scale(box, box_weight));
}

/// A label-preserving variant of a scene: optional mirror, a permutation of
/// the color channels, and an integer shift with edge replication. Boxes
/// follow the image and are clipped; boxes left under half visible are dropped.
inline LabeledScene augment(const LabeledScene& scene, Rng& rng) {
  static constexpr std::array<std::array<int, 3>, 6> kPerms{
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  const bool flip = rng.below(2) == 1;
  const auto& perm = kPerms[rng.below(6)];
  const int dx = rng.uniform_int(-4, 4), dy = rng.uniform_int(-4, 4);
  const int h = scene.image.height(), w = scene.image.width();
  std::vector<double> v(scene.image.values().size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int sx = std::clamp(x - dx, 0, w - 1);
      const int sy = std::clamp(y - dy, 0, h - 1);
      if (flip) sx = w - 1 - sx;
      for (int c = 0; c < 3; ++c) v[(static_cast<std::size_t>(y) * w + x) * 3 + c] = scene.image.at(sy, sx, perm[c]);
    }
  }
  LabeledScene out{ImageBuffer(h, w, std::move(v)), {}};
  for (const auto& a : scene.objects) {
    Box b = a.box;
    if (flip) b = {w - a.box.x_max, b.y_min, w - a.box.x_min, b.y_max};
    b = {b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy};
    const Box clipped{std::max(0.0, b.x_min), std::max(0.0, b.y_min), std::min<double>(w, b.x_max),
                      std::min<double>(h, b.y_max)};
    if (clipped.x_min < clipped.x_max && clipped.y_min < clipped.y_max &&
        clipped.area() >= 0.5 * b.area()) {
      out.objects.push_back({a.label, clipped});
    }
  }
  return out;
}

}  // namespace detail

inline double mean_training_loss(const ToyDetector& det, const std::vector<LabeledScene>& data,
                                 double box_weight = 1.0, double smoothing = 0.0) {
  double s = 0.0;
  for (const auto& scene : data) {
    ad::Tape tape;
    const auto vars = det.bind(tape, false);
    s += tape.scalar(detail::record_training_loss(tape, det, vars, scene, box_weight, smoothing));
  }
  return data.empty() ? 0.0 : s / data.size();
}

/// Adam over seeded minibatches with a cosine step-size schedule.
inline DetectorTrainResult train_toy_detector(const std::vector<LabeledScene>& data,
                                              const DetectorTrainConfig& cfg) {
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.step_size > 0.0) || !(cfg.box_weight >= 0.0) ||
      !(cfg.label_smoothing >= 0.0 && cfg.label_smoothing < 0.5)) {
    throw InputError("train_toy_detector: epochs, batch size and step size must be positive, "
                     "label smoothing in [0, 0.5)");
  }
  const auto with_car = std::count_if(data.begin(), data.end(),
                                      [](const LabeledScene& s) { return contains_label(s, "car"); });
  if (with_car == 0 || with_car == static_cast<long>(data.size())) {
    throw InputError("train_toy_detector: need scenes both with and without a car");
  }
  DetectorTrainResult result{ToyDetector::initialized(cfg.arch, cfg.seed), 0.0, {}};
  ToyDetector& det = result.detector;
  for (const auto& s : data) {
    det.check_input(s.image.height(), s.image.width());
    for (const auto& a : s.objects) det.class_index(a.label);
  }
  Adam adam(det.params().size(), cfg.step_size);
  Rng rng(cfg.seed ^ 0xDE7EC7ULL);
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    adam.set_step_size(cfg.step_size * 0.5 *
                       (1.0 + std::cos(std::numbers::pi * epoch / std::max(1, cfg.epochs))));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - start);
      ad::Tape tape;
      const auto vars = det.bind(tape, true);
      ad::Var total{};
      for (std::size_t k = 0; k < count; ++k) {
        const LabeledScene& scene = data[order[start + k]];
        const ad::Var term = detail::record_training_loss(
            tape, det, vars, cfg.augment ? detail::augment(scene, rng) : scene, cfg.box_weight, cfg.label_smoothing);
        total = k == 0 ? term : tape.add(total, term);
      }
      ad::Var loss = tape.scale(total, 1.0 / static_cast<double>(count));
      const double value = tape.scalar(loss);
      if (!std::isfinite(value)) {
        throw NumericalError("train_toy_detector: non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += value * count;
      const ad::Gradients g = tape.backward(loss);
      std::vector<double> grad;
      grad.reserve(det.params().size());
      for (int s = 0; s < 4; ++s) {
        for (ad::Var v : {vars.w[s], vars.b[s]}) {
          const auto gv = g.of(v);
          grad.insert(grad.end(), gv.begin(), gv.end());
        }
      }
      adam.step(det.params(), grad);
    }
    result.epoch_losses.push_back(epoch_loss / n);
  }
  result.final_loss = mean_training_loss(det, data, cfg.box_weight, cfg.label_smoothing);
  if (!std::isfinite(result.final_loss)) throw NumericalError("train_toy_detector: diverged");
  return result;
}

/// Fraction of scenes containing a car in which a car is detected.
inline double benign_detection_rate(const DetectorModel& det, const std::vector<LabeledScene>& data,
                                    const DetectorThreshold& thr) {
  std::size_t total = 0, hits = 0;
  for (const auto& s : data) {
    if (!contains_label(s, thr.target_class)) continue;
    ++total;
    if (target_detected(det, s.image, thr)) ++hits;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

// ---------------------------------------------------------------------------
// Weights file

inline void save_detector(const ToyDetector& det, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "projforge-detector 1\n";
  out << "architecture grid3 kernel " << ToyDetector::kKernel << " stride " << ToyDetector::kStride
      << " stages " << det.arch().channels[0] << " " << det.arch().channels[1] << " "
      << det.arch().channels[2] << "\n";
  out << "seed " << det.seed() << "\n";
  out << "labels";
  for (const auto& l : det.labels()) out << " " << l;
  out << "\n";
  char buf[48];
  for (int s = 0; s < 4; ++s) {
    for (int part = 0; part < 2; ++part) {
      const auto v = part == 0 ? det.weights(s) : det.biases(s);
      out << (part == 0 ? "weights " : "biases ") << s << " " << v.size() << "\n";
      for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        out << buf << ((i + 1) % 8 == 0 || i + 1 == v.size() ? "\n" : " ");
      }
    }
  }
}

inline ToyDetector load_detector(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing detector weights '" + path.string() + "'");
  const std::string where = path.string() + ": ";
  std::string magic, version, key, kind;
  int kernel = 0, stride = 0;
  ToyDetectorArch arch;
  in >> magic >> version;
  if (magic != "projforge-detector" || version != "1") throw InputError(where + "not a detector file");
  std::string k1, k2, k3;
  in >> key >> kind >> k1 >> kernel >> k2 >> stride >> k3 >> arch.channels[0] >> arch.channels[1] >>
      arch.channels[2];
  if (!in || key != "architecture" || kind != "grid3" || kernel != ToyDetector::kKernel ||
      stride != ToyDetector::kStride) {
    throw InputError(where + "unsupported architecture line");
  }
  std::uint64_t seed = 0;
  in >> key >> seed;
  if (key != "seed") throw InputError(where + "missing seed");
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  std::istringstream ls(line);
  ls >> key;
  std::vector<std::string> labels;
  for (std::string l; ls >> l;) labels.push_back(l);
  if (key != "labels" || labels != std::vector<std::string>{"car", "cone", "other"}) {
    throw InputError(where + "label list must be `car cone other`");
  }
  ToyDetector det(arch, seed);
  for (int s = 0; s < 4; ++s) {
    for (int part = 0; part < 2; ++part) {
      auto v = part == 0 ? det.weights(s) : det.biases(s);
      int layer = -1;
      std::size_t count = 0;
      in >> key >> layer >> count;
      if (key != (part == 0 ? "weights" : "biases") || layer != s || count != v.size()) {
        throw InputError(where + "malformed block header for layer " + std::to_string(s));
      }
      for (double& x : v) {
        if (!(in >> x)) throw InputError(where + "truncated parameters in layer " + std::to_string(s));
      }
    }
  }
  return det;
}

}  // namespace projforge
