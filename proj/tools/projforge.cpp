// projforge: fit the projector models, optimize a patch, evaluate it.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "projforge/diagnostics.hpp"
#include "projforge/fixtures.hpp"
#include "projforge/projforge.hpp"

namespace fs = std::filesystem;
using namespace projforge;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "projforge_out";
  bool quiet = false;
  bool verify = false;
};

class Session {
 public:
  explicit Session(const Globals& g) : g_(g) {
    cfg_ = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
    if (g.seed) cfg_.seed = *g.seed;
    validate(cfg_);
  }

  RunConfig& config() { return cfg_; }
  const Globals& globals() const { return g_; }

  /// Creates the output directory and records the resolved config in it.
  fs::path open_out() {
    const fs::path out = g_.out;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw InputError("cannot create output directory '" + out.string() + "': " + ec.message());
    validate(cfg_);
    save_config(cfg_, out / "config.json");
    return out;
  }

  template <class... A>
  void say(const char* fmt, A... args) const {
    if (g_.quiet) return;
    std::printf(fmt, args...);
    std::fflush(stdout);
  }

 private:
  Globals g_;
  RunConfig cfg_;
};

fs::path detector_path(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!cfg.detector.path.empty()) return cfg.detector.path;
  return fixtures::default_dir() / "detector.txt";
}

std::vector<SceneBundle> load_bundles(const std::vector<std::string>& dirs, double regularization) {
  if (dirs.empty()) throw InputError("no scene bundle given");
  std::vector<SceneBundle> out;
  for (const auto& d : dirs) out.push_back(load_scene_bundle(d, regularization));
  const auto& shape = out.front().attack_view.ops.patch_shape;
  for (const auto& b : out) {
    if (!b.attack_view.ops.patch_shape.same_shape(shape)) {
      throw InputError("scene bundles disagree on the patch size");
    }
  }
  return out;
}

/// The union of the bundles' backgrounds, exact duplicates dropped.
std::vector<ImageBuffer> pooled_backgrounds(const std::vector<SceneBundle>& bundles) {
  std::vector<ImageBuffer> out;
  for (const auto& b : bundles)
    for (const auto& bg : b.backgrounds) {
      const bool seen = std::any_of(out.begin(), out.end(), [&](const ImageBuffer& o) {
        return o.same_shape(bg) && o.values() == bg.values();
      });
      if (!seen) out.push_back(bg);
    }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_fit_tps(Session& s, const std::string& controls) {
  const ControlPointSet cps = load_control_points(controls);
  const TpsTransform tps = fit_tps_transform(cps, s.config().tps.regularization);
  const fs::path out = s.open_out();
  save_tps_transform(tps, out / "tps_model.txt");
  s.say("fitted %zu control pairs, regularization %g\n", cps.size(), s.config().tps.regularization);
  s.say("max control error %.3e px, max |w| %.3e\n", max_control_error(tps.forward, cps), max_abs_weight(tps.forward));
  s.say("wrote %s\n", (out / "tps_model.txt").string().c_str());
  if (s.globals().verify) {
    const TpsTransform reloaded = load_tps_transform(out / "tps_model.txt");
    const double err = max_control_error(reloaded.forward, cps);
    const bool ok = err <= 1e-6;
    std::printf("%s verify: saved model maps controls within %.3e px (limit 1e-6)\n", ok ? "PASS" : "FAIL", err);
    if (!ok) return exit_code::kNumerical;
  }
  return exit_code::kOk;
}

int cmd_fit_color(Session& s, const std::string& dataset_path, const std::vector<std::string>& synth) {
  ColorDataset data, held;
  bool have_held = false;
  const auto& cc = s.config().color;
  if (!synth.empty()) {
    if (synth.size() != 2) throw InputError("--synthesize takes a capture law and a seed");
    const CaptureLaw law = capture_law(synth[0]);
    std::uint64_t seed = 0;
    try {
      std::size_t used = 0;
      seed = std::stoull(synth[1], &used);
      if (used != synth[1].size()) throw std::invalid_argument(synth[1]);
    } catch (const std::exception&) {
      throw InputError("--synthesize: seed '" + synth[1] + "' is not an unsigned integer");
    }
    data = synthesize_random(law, cc.samples, seed);
    if (cc.holdout > 0) {
      held = synthesize_random(law, cc.holdout, holdout_seed(seed));
      have_held = true;
    }
  } else {
    if (dataset_path.empty()) throw InputError("fit-color needs a dataset file or --synthesize <law> <seed>");
    data = load_color_dataset(dataset_path);
    if (data.samples.empty()) throw InputError("color dataset '" + dataset_path + "' is empty");
  }
  const ColorTrainResult r = train_color_model(data, s.config().color_train());
  const fs::path out = s.open_out();
  if (!synth.empty()) {
    save_color_dataset(data, out / "dataset.txt");
    if (have_held) save_color_dataset(held, out / "holdout.txt");
  }
  save_color_model(r.model, out / "color_model.txt");
  std::printf("final L1 %.6f\n", mean_l1(r.model, data));
  if (have_held) std::printf("held-out L1 %.6f\n", mean_l1(r.model, held));
  s.say("wrote %s\n", (out / "color_model.txt").string().c_str());
  return exit_code::kOk;
}

int cmd_train_detector(Session& s, const std::string& scenes_dir, const std::vector<std::string>& synth) {
  std::vector<LabeledScene> data;
  if (!synth.empty()) {
    if (synth.size() != 2) throw InputError("--synthesize takes a scene count and a seed");
    data = synth::detector_scenes(std::stoul(synth[0]), std::stoull(synth[1]));
  } else {
    if (scenes_dir.empty()) throw InputError("train-detector needs a scene directory or --synthesize <count> <seed>");
    data = load_labeled_scenes(scenes_dir);
  }
  s.say("training on %zu scenes for %d epochs\n", data.size(), s.config().detector.epochs);
  const DetectorTrainResult r = train_toy_detector(data, s.config().detector_train());
  const fs::path out = s.open_out();
  save_detector(r.detector, out / "detector.txt");
  std::printf("final loss %.6f\n", r.final_loss);
  const DetectorThreshold thr = s.config().threshold();
  std::printf("benign detection rate (training scenes) %.4f\n", benign_detection_rate(r.detector, data, thr));
  if (!synth.empty()) {
    std::printf("benign detection rate (held-out scenes) %.4f\n",
                benign_detection_rate(r.detector, fixtures::held_out_scenes(), thr));
  }
  s.say("wrote %s\n", (out / "detector.txt").string().c_str());
  return exit_code::kOk;
}

int cmd_train_patch(Session& s, const std::vector<std::string>& bundle_dirs, const std::string& det_flag) {
  const auto bundles = load_bundles(bundle_dirs, s.config().tps.regularization);
  const ToyDetector det = load_detector(detector_path(s.config(), det_flag));
  AttackConfig cfg = s.config().attack_config();
  for (const auto& b : bundles) cfg.eot.views.push_back(b.attack_view);
  cfg.eot.backgrounds = pooled_backgrounds(bundles);
  const auto& shape = cfg.eot.views.front().ops.patch_shape;
  const PatchParams initial = PatchParams::mid_gray(cfg.cells, shape.height(), shape.width());
  s.say("optimizing %dx%d cells over %zu views, %zu backgrounds, %d iterations\n", cfg.cells, cfg.cells,
        cfg.eot.views.size(), cfg.eot.backgrounds.size(), cfg.iterations);
  const AttackResult r = run_attack(initial, det, cfg);
  const fs::path out = s.open_out();
  save_trace(r.trace, cfg, out / "trace.csv");
  save_image(patch_delta(r.patch), out / "patch_final.ppm");
  save_patch(r.patch, out / "patch_final.txt");
  char name[64];
  for (const auto& c : r.checkpoints) {
    std::snprintf(name, sizeof name, "patch_iter_%04d.ppm", c.iteration);
    save_image(c.patch, out / name);
    std::snprintf(name, sizeof name, "preview_iter_%04d.ppm", c.iteration);
    save_image(c.preview, out / name);
  }
  if (!r.trace.empty()) {
    std::printf("J first %.6f last %.6f\n", r.trace.front().terms.detection, r.trace.back().terms.detection);
  }
  if (r.aborted) {
    std::fprintf(stderr, "error: %s; kept the last finite patch\n", r.abort_reason.c_str());
    return exit_code::kNumerical;
  }
  s.say("wrote %s\n", out.string().c_str());
  return exit_code::kOk;
}

ImageBuffer load_patch_image(const std::string& path, int height, int width) {
  if (path.empty()) throw InputError("evaluate needs --patch");
  ImageBuffer delta = fs::path(path).extension() == ".ppm" ? load_image(path) : patch_delta(load_patch(path));
  if (delta.height() != height || delta.width() != width) {
    throw InputError("patch '" + path + "' is " + std::to_string(delta.height()) + "x" + std::to_string(delta.width()) +
                     ", bundles expect " + std::to_string(height) + "x" + std::to_string(width));
  }
  return delta;
}

int cmd_evaluate(Session& s, const std::vector<std::string>& bundle_dirs, const std::string& patch_path,
                 const std::string& det_flag, const std::vector<std::string>& ambient_flags,
                 const std::vector<std::string>& distance_flags, const std::string& models_dir) {
  RunConfig& rc = s.config();
  const auto bundles = load_bundles(bundle_dirs, rc.tps.regularization);
  const ToyDetector det = load_detector(detector_path(rc, det_flag));
  const auto& shape = bundles.front().attack_view.ops.patch_shape;
  const ImageBuffer patch = load_patch_image(patch_path, shape.height(), shape.width());

  const std::vector<std::string> labels = ambient_flags.empty() ? rc.sweep.ambients : ambient_flags;
  std::vector<SweepAmbient> ambients;
  for (const auto& label : labels) {
    const auto it = std::find(rc.sweep.ambients.begin(), rc.sweep.ambients.end(), label);
    if (it == rc.sweep.ambients.end()) throw InputError("unknown ambient label '" + label + "'");
    const std::size_t i = static_cast<std::size_t>(it - rc.sweep.ambients.begin());
    const fs::path model = !rc.sweep.ambient_models.empty()
                               ? fs::path(rc.sweep.ambient_models[i])
                               : (models_dir.empty() ? fixtures::default_dir() : fs::path(models_dir)) /
                                     ("color_" + label + ".txt");
    ambients.push_back({label, load_color_model(model)});
  }
  if (!distance_flags.empty()) {
    std::vector<SweepDistance> chosen;
    for (const auto& label : distance_flags) {
      const auto it = std::find_if(rc.sweep.distances.begin(), rc.sweep.distances.end(),
                                   [&](const SweepDistance& d) { return d.label == label; });
      if (it == rc.sweep.distances.end()) throw InputError("unknown distance label '" + label + "'");
      chosen.push_back(*it);
    }
    rc.sweep.distances = chosen;
  }
  rc.sweep.ambients = labels;
  rc.sweep.ambient_models.clear();

  std::vector<SweepView> views;
  for (const auto& b : bundles) views.push_back({b.view, b.attack_view, b.backgrounds});
  const SweepGrid grid = run_sweep(views, patch, det, ambients, rc.threshold(), rc.sweep_config());
  const fs::path out = s.open_out();
  emit_report(grid, out);
  std::printf("cells %zu, mean OMDR with patch %.4f, without %.4f\n", grid.cells.size(), grid.mean_attack(),
              grid.mean_benign());
  for (const auto& a : ambients) std::printf("  %s: with patch %.4f\n", a.label.c_str(), grid.mean_attack(a.label));
  s.say("wrote %s\n", (out / "sweep.csv").string().c_str());
  return exit_code::kOk;
}

int report(const std::vector<diag::Check>& checks) {
  for (const auto& c : checks) std::printf("%s %s: %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
  return diag::all_passed(checks) ? exit_code::kOk : exit_code::kNumerical;
}

int cmd_diag(Session& s, const std::string& target, const std::vector<std::string>& files,
             const std::string& fixture_flag) {
  const fs::path fx = fixture_flag.empty() ? fixtures::default_dir() : fs::path(fixture_flag);
  const fs::path out = s.open_out();
  if (target == "gradients") {
    const ToyDetector det = load_detector(fx / "detector.txt");
    const SceneBundle bundle = load_scene_bundle(fx / "bundles" / fixtures::bundle_name(0));
    return report(diag::gradients(det, bundle, s.config().seed));
  }
  if (target == "tps") {
    std::vector<std::string> paths = files;
    if (paths.empty()) {
      for (const char* n : {"controls_identity.txt", "controls_affine.txt", "controls_checkerboard.txt"})
        paths.push_back((fx / n).string());
      for (int a : fixtures::kAngles) paths.push_back((fx / "bundles" / fixtures::bundle_name(a) / "controls.txt").string());
    }
    std::vector<diag::Check> checks;
    for (const auto& p : paths) {
      const std::string stem = fs::path(p).filename().string();
      const bool affine = stem.find("identity") != std::string::npos || stem.find("affine") != std::string::npos;
      checks.push_back(diag::tps_audit(p, load_control_points(p), affine));
    }
    return report(checks);
  }
  if (target == "determinism") {
    const ToyDetector det = load_detector(fx / "detector.txt");
    const auto bundles = fixtures::load_bundles(fx);
    const fs::path scratch = out / "determinism";
    fs::remove_all(scratch);
    return report(diag::determinism(det, bundles, scratch, s.config().seed));
  }
  throw InputError("unknown diag target '" + target + "' (gradients, tps, determinism)");
}

int cmd_synth_fixtures(Session& s, bool skip_detector) {
  const fs::path out = s.open_out();
  fixtures::GenerateOptions opts;
  opts.train_detector = !skip_detector;
  opts.log = [&](const std::string& m) { s.say("%s\n", m.c_str()); };
  fixtures::generate(out, opts);
  s.say("wrote fixtures to %s\n", out.string().c_str());
  return exit_code::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Projector-based adversarial patch toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON file overriding default settings")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for every stochastic stage");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_flag("--quiet", g.quiet, "Print results only");

  std::string controls;
  auto* fit_tps = app.add_subcommand("fit-tps", "Fit the projector-to-camera warp from control points");
  fit_tps->add_option("controls", controls, "Control-point file (sx sy tx ty per line)")->required();
  std::optional<double> regularization;
  fit_tps->add_option("--regularization", regularization, "Smoothing weight, 0 interpolates exactly");
  fit_tps->add_flag("--verify", g.verify, "Reload the saved model and check it reproduces the controls");

  std::string dataset;
  std::vector<std::string> color_synth;
  auto* fit_color = app.add_subcommand("fit-color", "Train the projector color model");
  fit_color->add_option("dataset", dataset, "Dataset file (Sr Sg Sb Pr Pg Pb Or Og Ob per line)");
  fit_color->add_option("--synthesize", color_synth, "Simulate a capture: <law> <seed>")->expected(2);

  std::string scenes_dir;
  std::vector<std::string> det_synth;
  auto* train_det = app.add_subcommand("train-detector", "Train the toy grid detector");
  train_det->add_option("scenes", scenes_dir, "Directory of labeled scenes");
  train_det->add_option("--synthesize", det_synth, "Generate scenes: <count> <seed>")->expected(2);

  std::vector<std::string> bundle_dirs;
  std::string det_flag;
  auto* train_patch = app.add_subcommand("train-patch", "Optimize a projected patch against the detector");
  train_patch->add_option("bundles", bundle_dirs, "Scene bundle directories, one per view")->required();
  train_patch->add_option("--detector", det_flag, "Detector weights file");

  std::string patch_path, models_dir;
  std::vector<std::string> ambient_flags, distance_flags;
  auto* evaluate = app.add_subcommand("evaluate", "Sweep distance, angle and ambient light and report OMDR");
  evaluate->add_option("bundles", bundle_dirs, "Scene bundle directories, one per angle")->required();
  evaluate->add_option("--patch", patch_path, "Patch image (.ppm) or latent file (.txt)")->required();
  evaluate->add_option("--detector", det_flag, "Detector weights file");
  evaluate->add_option("--ambient", ambient_flags, "Ambient label to include (repeatable)");
  evaluate->add_option("--distance", distance_flags, "Distance label to include (repeatable)");
  evaluate->add_option("--models", models_dir, "Directory holding color_<ambient>.txt");

  std::string diag_target, fixture_flag;
  std::vector<std::string> diag_files;
  auto* diag = app.add_subcommand("diag", "Run a verification suite");
  diag->add_option("target", diag_target, "gradients | tps | determinism")
      ->required()
      ->check(CLI::IsMember({"gradients", "tps", "determinism"}));
  diag->add_option("files", diag_files, "Control-point files for the tps audit");
  diag->add_option("--fixtures", fixture_flag, "Fixture directory");

  bool skip_detector = false;
  auto* synth_fx = app.add_subcommand("synth-fixtures", "Regenerate the bundled fixtures");
  synth_fx->add_flag("--skip-detector", skip_detector, "Keep the existing detector.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_code::kOk : exit_code::kInput;
  }

  try {
    Session s(g);
    if (regularization) s.config().tps.regularization = *regularization;
    if (*fit_tps) return cmd_fit_tps(s, controls);
    if (*fit_color) return cmd_fit_color(s, dataset, color_synth);
    if (*train_det) return cmd_train_detector(s, scenes_dir, det_synth);
    if (*train_patch) return cmd_train_patch(s, bundle_dirs, det_flag);
    if (*evaluate) {
      return cmd_evaluate(s, bundle_dirs, patch_path, det_flag, ambient_flags, distance_flags, models_dir);
    }
    if (*diag) return cmd_diag(s, diag_target, diag_files, fixture_flag);
    if (*synth_fx) return cmd_synth_fixtures(s, skip_detector);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code::kNumerical;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code::kInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code::kInput;
  }
  return exit_code::kInput;
}
