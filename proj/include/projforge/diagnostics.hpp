#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "projforge/attack.hpp"
#include "projforge/autodiff.hpp"
#include "projforge/bundle.hpp"
#include "projforge/colormap.hpp"
#include "projforge/detector.hpp"
#include "projforge/eval.hpp"
#include "projforge/rng.hpp"
#include "projforge/synth.hpp"
#include "projforge/tps.hpp"

namespace projforge::diag {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline bool all_passed(const std::vector<Check>& checks) {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return !checks.empty();
}

inline constexpr double kGradientTolerance = 1e-4;
inline constexpr std::size_t kGradientSamples = 60;

inline Check gradient_check(const std::string& name, const ad::ScalarFunction& fn, std::vector<double> point,
                            double step, std::uint64_t seed) {
  const auto r = ad::check_gradients(fn, std::move(point), step, kGradientTolerance, kGradientSamples, seed);
  char buf[200];
  std::snprintf(buf, sizeof buf, "%zu coordinates, worst relative error %.3e (analytic %.6e, numeric %.6e)",
                r.checked, r.worst_relative_error, r.analytic_at_worst, r.numeric_at_worst);
  return {name, r.passed && r.checked >= 50, buf};
}

/// Reverse-mode gradients against central differences for the color model,
/// total variation, the detection loss and the full attack objective.
inline std::vector<Check> gradients(const ToyDetector& det, const SceneBundle& bundle, std::uint64_t seed) {
  std::vector<Check> checks;
  Rng rng(seed);
  const ColorModel& color = bundle.attack_view.ops.color;

  {
    constexpr int kPixels = 24;
    std::vector<double> surfaces(kPixels * 3), projected(kPixels * 3), weights(kPixels * 3);
    for (double& v : surfaces) v = rng.uniform(0.1, 0.9);
    for (double& v : projected) v = rng.uniform(0.1, 0.9);
    for (double& v : weights) v = rng.uniform(-1.0, 1.0);
    auto fn = [&](std::span<const double> p, std::vector<double>* grad) {
      ad::Tape tape;
      const auto vars = bind_color_model(tape, color, false);
      ad::Var proj = tape.variable({kPixels, 3}, std::vector<double>(p.begin(), p.end()));
      ad::Var in = tape.concat(tape.constant({kPixels, 3}, surfaces), proj);
      ad::Var out = tape.clamp(color_forward(tape, vars, in), 0.0, 1.0);
      ad::Var loss = tape.sum(tape.mul(out, tape.constant({kPixels, 3}, weights)));
      if (grad) *grad = tape.backward(loss).of(proj);
      return tape.scalar(loss);
    };
    checks.push_back(gradient_check("predict_color wrt projected color", fn, projected, 1e-6, seed));
  }
  {
    std::vector<double> img(12 * 12 * 3);
    for (double& v : img) v = rng.uniform();
    auto fn = [](std::span<const double> p, std::vector<double>* grad) {
      ad::Tape tape;
      ad::Var x = tape.variable({12, 12, 3}, std::vector<double>(p.begin(), p.end()));
      ad::Var tv = tape.total_variation(x);
      if (grad) *grad = tape.backward(tv).of(x);
      return tape.scalar(tv);
    };
    checks.push_back(gradient_check("total_variation", fn, img, 1e-4, seed + 1));
  }
  const ImageBuffer& bg = bundle.backgrounds.front();
  const AttackView& view = bundle.attack_view;
  {
    const ImageBuffer scene = render_placement(plan_placement(view.scene(bg), {}), view.object_img);
    auto fn = [&](std::span<const double> p, std::vector<double>* grad) {
      ad::Tape tape;
      ad::Var x = tape.variable({scene.height(), scene.width(), 3}, std::vector<double>(p.begin(), p.end()));
      ad::Var j = det.record_detection_loss(tape, x, det.class_index("car"));
      if (grad) *grad = tape.backward(j).of(x);
      return tape.scalar(j);
    };
    checks.push_back(gradient_check("detection_loss wrt image", fn, scene.values(), 1e-6, seed + 2));
  }
  {
    AttackConfig cfg;
    PatchParams patch = PatchParams::mid_gray(cfg.cells, view.ops.patch_shape.height(), view.ops.patch_shape.width());
    for (double& v : patch.latent) v = 0.5 * rng.normal();
    const PlacementTransform t = TransformRange{}.sample(rng, bg.height(), bg.width());
    const PreparedView prepared = prepare_view(view);
    auto fn = [&](std::span<const double> p, std::vector<double>* grad) {
      PatchParams q = patch;
      q.latent.assign(p.begin(), p.end());
      StepResult r = attack_step(q, view, prepared, bg, t, det, cfg);
      if (grad) *grad = std::move(r.grad);
      return r.terms.total;
    };
    checks.push_back(gradient_check("attack_step loss wrt latent", fn, patch.latent, 1e-6, seed + 3));
  }
  return checks;
}

/// Interpolation audit: every control maps to its target within 1e-6 px;
/// sets whose name marks them affine must also have near-zero bending weights.
inline Check tps_audit(const std::string& name, const ControlPointSet& cps, bool affine) {
  const TpsModel m = fit_tps(cps, 0.0);
  const double err = max_control_error(m, cps);
  const double w = max_abs_weight(m);
  char buf[160];
  std::snprintf(buf, sizeof buf, "max control error %.3e px, max |w| %.3e", err, w);
  return {name, err <= 1e-6 && (!affine || w < 1e-8), buf};
}

/// 64-bit FNV-1a over a file's bytes.
inline std::uint64_t file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Runs each stage twice into separate directories and compares the bytes
/// of what it writes. Stages are shortened versions of the real runs.
inline std::vector<Check> determinism(const ToyDetector& det, const std::vector<SceneBundle>& bundles,
                                      const std::filesystem::path& scratch, std::uint64_t seed) {
  namespace fs = std::filesystem;
  using Stage = std::function<void(const fs::path&)>;
  std::vector<std::pair<std::string, Stage>> stages;
  stages.push_back({"tps model", [&](const fs::path& d) {
                      save_tps_transform(fit_tps_transform(bundles.front().controls, 0.0), d / "out.txt");
                    }});
  stages.push_back({"color model", [&](const fs::path& d) {
                      ColorTrainConfig c;
                      c.epochs = 20;
                      c.seed = seed;
                      save_color_model(train_color_model(synthesize_random(capture_law("100lux"), 256, seed), c).model,
                                       d / "out.txt");
                    }});
  stages.push_back({"detector weights", [&](const fs::path& d) {
                      DetectorTrainConfig c;
                      c.epochs = 3;
                      c.seed = seed;
                      save_detector(train_toy_detector(synth::detector_scenes(24, seed), c).detector, d / "out.txt");
                    }});
  stages.push_back({"attack trace", [&](const fs::path& d) {
                      AttackConfig c;
                      c.iterations = 10;
                      c.seed = seed;
                      c.threads = 2;
                      for (const auto& b : bundles) c.eot.views.push_back(b.attack_view);
                      c.eot.backgrounds = bundles.front().backgrounds;
                      const auto& v = c.eot.views.front();
                      const auto r = run_attack(
                          PatchParams::mid_gray(c.cells, v.ops.patch_shape.height(), v.ops.patch_shape.width()), det, c);
                      save_trace(r.trace, c, d / "out.txt");
                    }});
  stages.push_back({"sweep report", [&](const fs::path& d) {
                      std::vector<SweepView> views;
                      for (const auto& b : bundles) views.push_back({b.view, b.attack_view, b.backgrounds});
                      SweepConfig c;
                      c.frames_per_cell = 2;
                      c.seed = seed;
                      c.threads = 2;
                      const auto& ops = bundles.front().attack_view.ops;
                      const ImageBuffer patch(ops.patch_shape.height(), ops.patch_shape.width(), 0.8);
                      emit_report(run_sweep(views, patch, det, {{"100lux", ops.color}}, DetectorThreshold{}, c), d);
                      fs::rename(d / "sweep.csv", d / "out.txt");
                    }});
  std::vector<Check> checks;
  for (const auto& [name, run] : stages) {
    std::uint64_t digest[2];
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path d = scratch / (std::to_string(checks.size()) + "_" + std::to_string(rep));
      fs::create_directories(d);
      run(d);
      digest[rep] = file_digest(d / "out.txt");
    }
    checks.push_back({name, digest[0] == digest[1], hex(digest[0]) + " " + hex(digest[1])});
  }
  return checks;
}

}  // namespace projforge::diag
