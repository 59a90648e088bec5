#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "projforge/autodiff.hpp"
#include "projforge/colormap.hpp"
#include "projforge/compositor.hpp"
#include "projforge/detector.hpp"
#include "projforge/error.hpp"
#include "projforge/image.hpp"
#include "projforge/optim.hpp"
#include "projforge/parallel.hpp"
#include "projforge/rng.hpp"

namespace projforge {

/// Bound applied to the latent after every update. squash(3) = 0.99753, so
/// every patch value, even after 8-bit export, stays strictly inside (0, 1).
constexpr double kLatentBound = 3.0;

/// n x n cells of unconstrained latent color; the projected image is the
/// squashed latent with each cell filling a (height/n) x (width/n) block.
struct PatchParams {
  int cells = 10;
  int height = 20;
  int width = 20;
  std::vector<double> latent;  // cells x cells x 3, row-major

  /// Latent all zero, projecting uniform 0.5.
  static PatchParams mid_gray(int cells, int height, int width) {
    PatchParams p{cells, height, width, std::vector<double>(static_cast<std::size_t>(cells) * cells * 3, 0.0)};
    p.validate();
    return p;
  }

  void validate() const {
    if (cells < 1 || height < 1 || width < 1 || height % cells != 0 || width % cells != 0) {
      throw InputError("patch: " + std::to_string(height) + "x" + std::to_string(width) +
                       " pixels are not divisible into " + std::to_string(cells) + "x" +
                       std::to_string(cells) + " cells");
    }
    if (latent.size() != static_cast<std::size_t>(cells) * cells * 3) {
      throw InputError("patch: latent has " + std::to_string(latent.size()) + " values, expected " +
                       std::to_string(cells * cells * 3));
    }
    for (double v : latent) {
      if (!std::isfinite(v)) throw NumericalError("patch: non-finite latent value");
    }
  }
};

/// Each output pixel copies its cell.
inline std::shared_ptr<const PixelMap> block_upsample(int cells, int height, int width) {
  if (cells < 1 || height % cells != 0 || width % cells != 0) {
    throw InputError("block_upsample: size " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by " + std::to_string(cells));
  }
  auto map = std::make_shared<PixelMap>(cells, cells, height, width);
  const int bh = height / cells, bw = width / cells;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      auto& row = map->row(static_cast<std::size_t>(y) * width + x);
      row.col = {(y / bh) * cells + x / bw, 0, 0, 0};
      row.weight = {1.0, 0.0, 0.0, 0.0};
    }
  }
  return map;
}

inline ImageBuffer latent_to_delta(std::span<const double> latent, int cells, int height, int width) {
  const auto up = block_upsample(cells, height, width);
  if (latent.size() != static_cast<std::size_t>(cells) * cells * 3) {
    throw InputError("latent_to_delta: latent size does not match the cell grid");
  }
  std::vector<double> squashed(latent.begin(), latent.end());
  for (double& v : squashed) v = ad::squash(v);
  return ImageBuffer(height, width, up->apply(squashed, 3));
}

inline ImageBuffer patch_delta(const PatchParams& p) {
  p.validate();
  return latent_to_delta(p.latent, p.cells, p.height, p.width);
}

/// Sum of absolute channel differences over horizontal and vertical
/// neighbors, divided by the pixel count.
inline double total_variation(const ImageBuffer& img) {
  ad::Tape tape;
  return tape.scalar(tape.total_variation(tape.constant({img.height(), img.width(), 3}, img.values())));
}

// ---------------------------------------------------------------------------
// Expectation over transformation

/// Ranges of the random similarity and photometric changes applied to the
/// attacked object. Shifts are a fraction of the background size.
struct TransformRange {
  double scale_min = 0.8;
  double scale_max = 1.2;
  double shift_fraction = 0.1;
  double rotation_deg = 10.0;
  double brightness = 0.1;
  double noise_sigma = 0.02;

  static TransformRange identity() { return {1.0, 1.0, 0.0, 0.0, 0.0, 0.0}; }

  void validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max) || !(shift_fraction >= 0.0) ||
        !(rotation_deg >= 0.0) || !(brightness >= 0.0) || !(noise_sigma >= 0.0)) {
      throw InputError("transform range: need 0 < scale_min <= scale_max and nonnegative spreads");
    }
  }

  /// Always consumes the same number of draws, whatever the ranges.
  PlacementTransform sample(Rng& rng, int bg_height, int bg_width) const {
    PlacementTransform t;
    t.scale = rng.uniform(scale_min, scale_max);
    t.shift_x = rng.uniform(-shift_fraction, shift_fraction) * bg_width;
    t.shift_y = rng.uniform(-shift_fraction, shift_fraction) * bg_height;
    t.rotation_deg = rng.uniform(-rotation_deg, rotation_deg);
    t.brightness = rng.uniform(-brightness, brightness);
    t.noise_sigma = noise_sigma;
    t.noise_seed = rng.next_u64();
    return t;
  }
};

/// One viewing angle of the target: its object image and mask, where it
/// sits on a background, and the projector model for that view.
struct AttackView {
  std::string label;
  ImageBuffer object_img;
  ImageBuffer object_mask;
  int placement_x = 0;
  int placement_y = 0;
  ProjectionOperands ops;

  SceneSpec scene(const ImageBuffer& background) const {
    return {object_img, object_mask, background, placement_x, placement_y};
  }
};

struct EotConfig {
  std::vector<AttackView> views;
  std::vector<ImageBuffer> backgrounds;
  std::vector<TransformRange> transforms{TransformRange{}};
  int samples_per_step = 16;

  void validate() const {
    if (views.empty() || backgrounds.empty() || transforms.empty() || samples_per_step < 1) {
      throw InputError("EOT: need at least one view, background, transform and sample per step");
    }
    for (const auto& t : transforms) t.validate();
    for (const auto& v : views) {
      for (const auto& b : backgrounds) validate_scene(v.scene(b));
    }
  }

 private:
  static void validate_scene(const SceneSpec& s) { projforge::validate(s); }
};

struct AttackConfig {
  double lambda = 0.01;
  double p = 2.0;
  double tv_weight = 0.1;
  double step_size = 0.1;
  int iterations = 500;
  std::uint64_t seed = 7;
  int cells = 10;
  std::string target_class = "car";
  int checkpoint_every = 100;
  int threads = 1;
  EotConfig eot;

  void validate() const {
    if (!(lambda >= 0.0) || !(p >= 1.0) || !(tv_weight >= 0.0) || !(step_size > 0.0) ||
        iterations < 0 || cells < 1 || checkpoint_every < 1) {
      throw InputError("attack config: need lambda >= 0, p >= 1, tv_weight >= 0, step size > 0, "
                       "iterations >= 0, cells >= 1, checkpoint interval >= 1");
    }
  }
};

/// Patch-independent state of one view: the projection plan and the object
/// region over which the p-norm is taken.
struct PreparedView {
  ProjectionPlan projection;
  std::shared_ptr<const PixelMap> region;  // gathers object pixels (mask > 0.5)
  ad::Constant negated_region;             // -x on that region
};

inline PreparedView prepare_view(const AttackView& view) {
  if (!view.object_img.same_shape(view.object_mask)) {
    throw InputError("view '" + view.label + "': object mask does not match object image");
  }
  PreparedView pv{plan_projection(view.ops, view.object_img), nullptr, nullptr};
  std::vector<int> pixels;
  for (int y = 0; y < view.object_img.height(); ++y)
    for (int x = 0; x < view.object_img.width(); ++x)
      if (view.object_mask.at(y, x, 0) > 0.5) pixels.push_back(y * view.object_img.width() + x);
  if (pixels.empty()) {
    pv.region = nullptr;
    return pv;
  }
  auto region = std::make_shared<PixelMap>(view.object_img.height(), view.object_img.width(),
                                           static_cast<int>(pixels.size()), 1);
  std::vector<double> neg(pixels.size() * 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    region->row(i).col = {pixels[i], 0, 0, 0};
    region->row(i).weight = {1.0, 0.0, 0.0, 0.0};
    for (int c = 0; c < 3; ++c) neg[i * 3 + c] = -view.object_img.values()[pixels[i] * 3 + c];
  }
  pv.region = std::move(region);
  pv.negated_region = ad::make_constant(std::move(neg));
  return pv;
}

/// Loss terms of one evaluation. `pnorm` and `tv` are unweighted.
struct StepTerms {
  double detection = 0.0;
  double pnorm = 0.0;
  double tv = 0.0;
  double total = 0.0;
};

struct StepResult {
  StepTerms terms;
  std::vector<double> grad;  // d total / d latent
};

/// One sample of the objective: project, place, detect, and add the
/// weighted p-norm and total-variation penalties.
inline StepResult attack_step(const PatchParams& patch, const AttackView& view, const PreparedView& prepared,
                              const ImageBuffer& background, const PlacementTransform& transform,
                              const DetectorModel& det, const AttackConfig& cfg) {
  if (patch.height != prepared.projection.patch_height || patch.width != prepared.projection.patch_width) {
    throw InputError("attack_step: patch size does not match the view's patch shape");
  }
  const int k = det.class_index(cfg.target_class);
  const int n = patch.cells;
  ad::Tape tape;
  const ColorModelVars color = bind_color_model(tape, view.ops.color, false);
  ad::Var latent = tape.variable({n, n, 3}, patch.latent);
  ad::Var delta = tape.map(tape.squash(latent), block_upsample(n, patch.height, patch.width));
  ad::Var attacked = record_projection(tape, prepared.projection, color, delta);
  const PlacementPlan placement = plan_placement(view.scene(background), transform);
  ad::Var scene = record_placement(tape, placement, attacked);
  ad::Var detection = det.record_detection_loss(tape, scene, k);

  ad::Var total = detection;
  StepResult r;
  r.terms.detection = tape.scalar(detection);
  if (prepared.region) {
    ad::Var diff = tape.add_const(tape.map(attacked, prepared.region), prepared.negated_region);
    ad::Var pn = tape.pnorm(diff, cfg.p);
    r.terms.pnorm = tape.scalar(pn);
    if (cfg.lambda > 0.0) total = tape.add(total, tape.scale(pn, cfg.lambda));
  }
  ad::Var tv = tape.total_variation(delta);
  r.terms.tv = tape.scalar(tv);
  if (cfg.tv_weight > 0.0) total = tape.add(total, tape.scale(tv, cfg.tv_weight));
  r.terms.total = tape.scalar(total);
  r.grad = tape.backward(total).of(latent);
  return r;
}

/// Convenience overload that prepares the view itself.
inline StepResult attack_step(const PatchParams& patch, const AttackView& view, const ImageBuffer& background,
                              const PlacementTransform& transform, const DetectorModel& det,
                              const AttackConfig& cfg) {
  return attack_step(patch, view, prepare_view(view), background, transform, det, cfg);
}

/// One draw of (view, background, transform).
struct EotSample {
  int view = 0;
  int background = 0;
  PlacementTransform transform;
};

inline EotSample draw_sample(const EotConfig& eot, Rng& rng) {
  EotSample s;
  s.view = static_cast<int>(rng.below(eot.views.size()));
  s.background = static_cast<int>(rng.below(eot.backgrounds.size()));
  const auto& range = eot.transforms[rng.below(eot.transforms.size())];
  const ImageBuffer& bg = eot.backgrounds[s.background];
  s.transform = range.sample(rng, bg.height(), bg.width());
  return s;
}

/// Mean of the samples' terms and gradients. Samples are evaluated in
/// `order` (possibly concurrently) but always reduced by sample index.
inline StepResult mean_step(const PatchParams& patch, const std::vector<EotSample>& samples,
                            const std::vector<PreparedView>& prepared, const DetectorModel& det,
                            const AttackConfig& cfg, std::span<const std::size_t> order, int threads) {
  if (order.size() != samples.size()) throw InputError("mean_step: order must cover every sample");
  std::vector<StepResult> results(samples.size());
  parallel_for(order.size(), threads, [&](std::size_t i) {
    const std::size_t s = order[i];
    const EotSample& smp = samples.at(s);
    results[s] = attack_step(patch, cfg.eot.views.at(smp.view), prepared.at(smp.view),
                             cfg.eot.backgrounds.at(smp.background), smp.transform, det, cfg);
  });
  StepResult mean;
  mean.grad.assign(patch.latent.size(), 0.0);
  for (const auto& r : results) {
    mean.terms.detection += r.terms.detection;
    mean.terms.pnorm += r.terms.pnorm;
    mean.terms.tv += r.terms.tv;
    mean.terms.total += r.terms.total;
    for (std::size_t i = 0; i < mean.grad.size(); ++i) mean.grad[i] += r.grad[i];
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  mean.terms.detection *= inv;
  mean.terms.pnorm *= inv;
  mean.terms.tv *= inv;
  mean.terms.total *= inv;
  for (double& g : mean.grad) g *= inv;
  return mean;
}

/// A rendered snapshot of the optimization.
struct Checkpoint {
  int iteration = 0;
  ImageBuffer patch;    // projected image delta
  ImageBuffer preview;  // delta | warped patch on the object | patched object
};

struct TraceRow {
  int iteration = 0;
  StepTerms terms;
};

struct AttackResult {
  PatchParams patch;
  std::vector<TraceRow> trace;
  std::vector<Checkpoint> checkpoints;
  bool aborted = false;
  std::string abort_reason;
};

/// Side-by-side strip: the patch, the light it casts on the first view's
/// object, and the patched object, separated by one-pixel white gutters.
inline ImageBuffer render_preview(const PatchParams& patch, const AttackView& view) {
  const ImageBuffer delta = patch_delta(patch);
  const ProjectedPatch projected = project_patch(view.ops, view.object_img, delta);
  const ImageBuffer mask = warp_mask(view.ops.tps, view.ops.patch_shape, view.object_img.height(),
                                     view.object_img.width());
  const ImageBuffer warped = warp_image(view.ops.tps, delta, view.object_img.height(), view.object_img.width()).first;
  const int oh = view.object_img.height(), ow = view.object_img.width();
  const int h = std::max(delta.height(), oh);
  const int w = delta.width() + 2 * ow + 2;
  ImageBuffer out(h, w, 1.0);
  auto blit = [&](const ImageBuffer& img, int x0, const ImageBuffer* gate) {
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        for (int c = 0; c < 3; ++c) {
          const double g = gate ? gate->at(y, x, c) : 1.0;
          out.set(y, x0 + x, c, std::clamp(g * img.at(y, x, c), 0.0, 1.0));
        }
  };
  blit(delta, 0, nullptr);
  blit(warped, delta.width() + 1, &mask);
  blit(projected.image, delta.width() + ow + 2, nullptr);
  return out;
}

/// Adam on the latent over Monte Carlo estimates of the expected loss, with
/// the step size decaying along a half cosine to zero at the last iteration.
/// Deterministic for a given seed whatever the thread count.
inline AttackResult run_attack(const PatchParams& initial, const DetectorModel& det, const AttackConfig& cfg) {
  cfg.validate();
  cfg.eot.validate();
  initial.validate();
  if (initial.cells != cfg.cells) {
    throw InputError("run_attack: patch has " + std::to_string(initial.cells) + " cells, config asks for " +
                     std::to_string(cfg.cells));
  }
  det.class_index(cfg.target_class);
  std::vector<PreparedView> prepared;
  for (const auto& v : cfg.eot.views) prepared.push_back(prepare_view(v));

  AttackResult result{initial, {}, {}, false, {}};
  PatchParams& patch = result.patch;
  Adam adam(patch.latent.size(), cfg.step_size);
  Rng rng(cfg.seed);
  const int threads = thread_budget(cfg.threads);
  auto checkpoint = [&](int it) {
    result.checkpoints.push_back({it, patch_delta(patch), render_preview(patch, cfg.eot.views.front())});
  };

  std::vector<std::size_t> order(cfg.eot.samples_per_step);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<EotSample> samples;
    for (int s = 0; s < cfg.eot.samples_per_step; ++s) samples.push_back(draw_sample(cfg.eot, rng));
    const StepResult step = mean_step(patch, samples, prepared, det, cfg, order, threads);
    const bool finite = std::isfinite(step.terms.total) &&
                        std::all_of(step.grad.begin(), step.grad.end(), [](double g) { return std::isfinite(g); });
    if (!finite) {
      result.aborted = true;
      result.abort_reason = "non-finite loss at iteration " + std::to_string(it);
      break;
    }
    result.trace.push_back({it, step.terms});
    if (it % cfg.checkpoint_every == 0) checkpoint(it);
    adam.set_step_size(cfg.step_size * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iterations)));
    adam.step(patch.latent, step.grad);
    for (double& v : patch.latent) v = std::clamp(v, -kLatentBound, kLatentBound);
  }
  // On abort the patch is still the last finite state; it becomes the final checkpoint.
  checkpoint(result.aborted ? static_cast<int>(result.trace.size()) : cfg.iterations);
  for (const auto& c : result.checkpoints) {
    for (double v : c.patch.values()) {
      if (!(v > 0.0 && v < 1.0)) throw NumericalError("run_attack: patch value left (0,1)");
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Files

/// `iteration,J,pnorm_term,tv_term,total`, penalty terms weighted.
inline void save_trace(const std::vector<TraceRow>& trace, const AttackConfig& cfg,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "iteration,J,pnorm_term,tv_term,total\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.terms.detection,
                  cfg.lambda * r.terms.pnorm, cfg.tv_weight * r.terms.tv, r.terms.total);
    out << buf;
  }
}

/// Exact latent: header `projforge-patch 1`, `cells n`, `size h w`, then
/// the latent values.
inline void save_patch(const PatchParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "projforge-patch 1\ncells " << p.cells << "\nsize " << p.height << " " << p.width << "\n";
  char buf[48];
  for (std::size_t i = 0; i < p.latent.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", p.latent[i]);
    out << buf << ((i + 1) % 3 == 0 ? "\n" : " ");
  }
}

inline PatchParams load_patch(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing patch file '" + path.string() + "'");
  std::string magic, version, k1, k2;
  PatchParams p;
  in >> magic >> version >> k1 >> p.cells >> k2 >> p.height >> p.width;
  if (!in || magic != "projforge-patch" || version != "1" || k1 != "cells" || k2 != "size") {
    throw InputError(path.string() + ": not a patch file");
  }
  if (p.cells < 1 || p.cells > 4096) throw InputError(path.string() + ": bad cell count");
  p.latent.resize(static_cast<std::size_t>(p.cells) * p.cells * 3);
  for (double& v : p.latent) {
    if (!(in >> v)) throw InputError(path.string() + ": truncated latent");
  }
  p.validate();
  return p;
}

}  // namespace projforge
