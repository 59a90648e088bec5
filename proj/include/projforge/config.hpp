#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "projforge/attack.hpp"
#include "projforge/colormap.hpp"
#include "projforge/detector.hpp"
#include "projforge/error.hpp"
#include "projforge/eval.hpp"

namespace projforge {

/// Every tunable of the pipeline. A config file overrides any subset; keys
/// it does not know are rejected.
struct RunConfig {
  std::uint64_t seed = 7;
  int threads = 0;  // 0: hardware concurrency, capped by PROJFORGE_THREADS

  struct Tps {
    double regularization = 0.0;
  } tps;

  struct Color {
    int hidden = 32;
    int epochs = 400;
    double step_size = 0.01;
    int batch_size = 64;
    int samples = 512;   // synthesized training samples
    int holdout = 128;   // synthesized held-out samples
  } color;

  struct Detector {
    std::string path;
    double threshold = 0.6;
    std::string target_class = "car";
    std::vector<int> channels{16, 32, 32};
    int epochs = 600;
    double step_size = 0.01;
    int batch_size = 16;
    double box_weight = 1.0;
    double label_smoothing = 0.0;
    bool augment = true;
  } detector;

  struct Attack {
    double lambda = 0.01;
    double p = 2.0;
    double tv_weight = 0.1;
    double step_size = 0.1;
    int iterations = 500;
    int cells = 10;
    int samples_per_step = 16;
    int checkpoint_every = 100;
    std::vector<TransformRange> transforms{TransformRange{}};
  } attack;

  struct Sweep {
    std::vector<SweepDistance> distances{{"1.5m", 1.0}, {"2.0m", 0.8}, {"2.5m", 0.6}};
    std::vector<std::string> ambients{"100lux", "200lux", "500lux"};
    std::vector<std::string> ambient_models;  // color model files, parallel to ambients
    int frames_per_cell = 32;
    TransformRange jitter = SweepConfig{}.jitter;
  } sweep;

  DetectorTrainConfig detector_train() const {
    if (detector.channels.size() != 3) throw InputError("config: detector.channels takes three widths");
    DetectorTrainConfig c;
    c.arch.channels = {detector.channels[0], detector.channels[1], detector.channels[2]};
    c.epochs = detector.epochs;
    c.step_size = detector.step_size;
    c.batch_size = detector.batch_size;
    c.box_weight = detector.box_weight;
    c.label_smoothing = detector.label_smoothing;
    c.augment = detector.augment;
    c.seed = seed;
    return c;
  }

  ColorTrainConfig color_train() const { return {color.hidden, color.epochs, color.step_size, color.batch_size, seed}; }

  DetectorThreshold threshold() const {
    DetectorThreshold t{detector.threshold, detector.target_class};
    t.validate();
    return t;
  }

  /// Attack settings without the scene sets, which come from bundles.
  AttackConfig attack_config() const {
    AttackConfig c;
    c.lambda = attack.lambda;
    c.p = attack.p;
    c.tv_weight = attack.tv_weight;
    c.step_size = attack.step_size;
    c.iterations = attack.iterations;
    c.seed = seed;
    c.cells = attack.cells;
    c.target_class = detector.target_class;
    c.checkpoint_every = attack.checkpoint_every;
    c.threads = threads;
    c.eot.transforms = attack.transforms;
    c.eot.samples_per_step = attack.samples_per_step;
    return c;
  }

  SweepConfig sweep_config() const {
    SweepConfig c;
    c.distances = sweep.distances;
    c.frames_per_cell = sweep.frames_per_cell;
    c.jitter = sweep.jitter;
    c.seed = seed;
    c.threads = threads;
    return c;
  }
};

namespace detail {

/// Reads `key` into `out` when present; records it as consumed.
template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& seen, const std::string& where) {
  if (!j.is_object()) throw InputError("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!seen.count(key)) throw InputError("config: unknown key '" + where + key + "'");
  }
}

inline nlohmann::ordered_json range_to_json(const TransformRange& t) {
  return {{"scale_min", t.scale_min},   {"scale_max", t.scale_max},       {"shift_fraction", t.shift_fraction},
          {"rotation_deg", t.rotation_deg}, {"brightness", t.brightness}, {"noise_sigma", t.noise_sigma}};
}

inline TransformRange range_from_json(const nlohmann::json& j, const std::string& where) {
  TransformRange t;
  std::set<std::string> seen;
  if (!j.is_object()) throw InputError("config: " + where + " must be an object");
  read_field(j, "scale_min", t.scale_min, seen);
  read_field(j, "scale_max", t.scale_max, seen);
  read_field(j, "shift_fraction", t.shift_fraction, seen);
  read_field(j, "rotation_deg", t.rotation_deg, seen);
  read_field(j, "brightness", t.brightness, seen);
  read_field(j, "noise_sigma", t.noise_sigma, seen);
  reject_unknown(j, seen, where + ".");
  t.validate();
  return t;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  if (c.threads < 0) throw InputError("config: threads must be nonnegative");
  if (!(c.tps.regularization >= 0.0)) throw InputError("config: tps.regularization must be nonnegative");
  if (c.color.hidden < 1 || c.color.epochs < 0 || !(c.color.step_size > 0.0) || c.color.batch_size < 1 ||
      c.color.samples < 1 || c.color.holdout < 0) {
    throw InputError("config: color settings must be positive");
  }
  c.detector_train();
  c.threshold();
  c.attack_config().validate();
  if (c.attack.transforms.empty() || c.attack.samples_per_step < 1) {
    throw InputError("config: attack needs at least one transform and one sample per step");
  }
  for (const auto& t : c.attack.transforms) t.validate();
  if (!c.sweep.ambient_models.empty() && c.sweep.ambient_models.size() != c.sweep.ambients.size()) {
    throw InputError("config: sweep.ambient_models must list one file per ambient label");
  }
  c.sweep_config().validate();
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["tps"] = {{"regularization", c.tps.regularization}};
  j["color"] = {{"hidden", c.color.hidden},         {"epochs", c.color.epochs},
                {"step_size", c.color.step_size},   {"batch_size", c.color.batch_size},
                {"samples", c.color.samples},       {"holdout", c.color.holdout}};
  j["detector"] = {{"path", c.detector.path},
                   {"threshold", c.detector.threshold},
                   {"target_class", c.detector.target_class},
                   {"channels", c.detector.channels},
                   {"epochs", c.detector.epochs},
                   {"step_size", c.detector.step_size},
                   {"batch_size", c.detector.batch_size},
                   {"box_weight", c.detector.box_weight},
                   {"label_smoothing", c.detector.label_smoothing},
                   {"augment", c.detector.augment}};
  auto transforms = nlohmann::ordered_json::array();
  for (const auto& t : c.attack.transforms) transforms.push_back(detail::range_to_json(t));
  j["attack"] = {{"lambda", c.attack.lambda},
                 {"p", c.attack.p},
                 {"tv_weight", c.attack.tv_weight},
                 {"step_size", c.attack.step_size},
                 {"iterations", c.attack.iterations},
                 {"cells", c.attack.cells},
                 {"samples_per_step", c.attack.samples_per_step},
                 {"checkpoint_every", c.attack.checkpoint_every},
                 {"transforms", transforms}};
  auto distances = nlohmann::ordered_json::array();
  for (const auto& d : c.sweep.distances) distances.push_back({{"label", d.label}, {"scale", d.scale}});
  j["sweep"] = {{"distances", distances},
                {"ambients", c.sweep.ambients},
                {"ambient_models", c.sweep.ambient_models},
                {"frames_per_cell", c.sweep.frames_per_cell},
                {"jitter", detail::range_to_json(c.sweep.jitter)}};
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  using detail::reject_unknown;
  RunConfig c;
  try {
    std::set<std::string> top;
    read_field(j, "seed", c.seed, top);
    read_field(j, "threads", c.threads, top);
    if (j.contains("tps")) {
      std::set<std::string> s;
      read_field(j["tps"], "regularization", c.tps.regularization, s);
      reject_unknown(j["tps"], s, "tps.");
    }
    top.insert("tps");
    if (j.contains("color")) {
      const auto& k = j["color"];
      std::set<std::string> s;
      read_field(k, "hidden", c.color.hidden, s);
      read_field(k, "epochs", c.color.epochs, s);
      read_field(k, "step_size", c.color.step_size, s);
      read_field(k, "batch_size", c.color.batch_size, s);
      read_field(k, "samples", c.color.samples, s);
      read_field(k, "holdout", c.color.holdout, s);
      reject_unknown(k, s, "color.");
    }
    top.insert("color");
    if (j.contains("detector")) {
      const auto& k = j["detector"];
      std::set<std::string> s;
      read_field(k, "path", c.detector.path, s);
      read_field(k, "threshold", c.detector.threshold, s);
      read_field(k, "target_class", c.detector.target_class, s);
      read_field(k, "channels", c.detector.channels, s);
      read_field(k, "epochs", c.detector.epochs, s);
      read_field(k, "step_size", c.detector.step_size, s);
      read_field(k, "batch_size", c.detector.batch_size, s);
      read_field(k, "box_weight", c.detector.box_weight, s);
      read_field(k, "label_smoothing", c.detector.label_smoothing, s);
      read_field(k, "augment", c.detector.augment, s);
      reject_unknown(k, s, "detector.");
    }
    top.insert("detector");
    if (j.contains("attack")) {
      const auto& k = j["attack"];
      std::set<std::string> s;
      read_field(k, "lambda", c.attack.lambda, s);
      read_field(k, "p", c.attack.p, s);
      read_field(k, "tv_weight", c.attack.tv_weight, s);
      read_field(k, "step_size", c.attack.step_size, s);
      read_field(k, "iterations", c.attack.iterations, s);
      read_field(k, "cells", c.attack.cells, s);
      read_field(k, "samples_per_step", c.attack.samples_per_step, s);
      read_field(k, "checkpoint_every", c.attack.checkpoint_every, s);
      s.insert("transforms");
      if (k.contains("transforms")) {
        c.attack.transforms.clear();
        for (std::size_t i = 0; i < k["transforms"].size(); ++i) {
          c.attack.transforms.push_back(
              detail::range_from_json(k["transforms"][i], "attack.transforms[" + std::to_string(i) + "]"));
        }
      }
      reject_unknown(k, s, "attack.");
    }
    top.insert("attack");
    if (j.contains("sweep")) {
      const auto& k = j["sweep"];
      std::set<std::string> s;
      s.insert("distances");
      if (k.contains("distances")) {
        c.sweep.distances.clear();
        for (const auto& d : k["distances"]) {
          std::set<std::string> ds;
          SweepDistance sd;
          read_field(d, "label", sd.label, ds);
          read_field(d, "scale", sd.scale, ds);
          reject_unknown(d, ds, "sweep.distances[].");
          c.sweep.distances.push_back(sd);
        }
      }
      read_field(k, "ambients", c.sweep.ambients, s);
      read_field(k, "ambient_models", c.sweep.ambient_models, s);
      read_field(k, "frames_per_cell", c.sweep.frames_per_cell, s);
      s.insert("jitter");
      if (k.contains("jitter")) c.sweep.jitter = detail::range_from_json(k["jitter"], "sweep.jitter");
      reject_unknown(k, s, "sweep.");
    }
    top.insert("sweep");
    reject_unknown(j, top, "");
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << to_json(c).dump(2) << "\n";
}

}  // namespace projforge
