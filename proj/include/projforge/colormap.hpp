#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "projforge/autodiff.hpp"
#include "projforge/error.hpp"
#include "projforge/image.hpp"
#include "projforge/optim.hpp"
#include "projforge/rng.hpp"

namespace projforge {

/// (surface color, projected color) => observed color.
struct ColorSample {
  Rgb surface{};
  Rgb projected{};
  Rgb observed{};
};

struct ColorDataset {
  std::vector<ColorSample> samples;
  std::string provenance;
};

/// Two-hidden-layer rectifier network 6 -> h -> h -> 3. Parameters are one
/// flat vector in the order W1 b1 W2 b2 W3 b3, weights row-major [out, in].
class ColorModel {
 public:
  static constexpr int kInputs = 6;
  static constexpr int kOutputs = 3;

  explicit ColorModel(int hidden = 32, std::uint64_t seed = 0)
      : hidden_(hidden), seed_(seed), params_(parameter_count(hidden), 0.0) {
    if (hidden < 1) throw InputError("ColorModel: hidden width must be positive");
  }

  /// He-uniform initial weights, zero biases.
  static ColorModel initialized(int hidden, std::uint64_t seed) {
    ColorModel m(hidden, seed);
    Rng rng(seed);
    auto fill = [&](std::span<double> w, int fan_in) {
      const double bound = std::sqrt(6.0 / fan_in);
      for (double& v : w) v = rng.uniform(-bound, bound);
    };
    fill(m.w1(), kInputs);
    fill(m.w2(), hidden);
    fill(m.w3(), hidden);
    return m;
  }

  static std::size_t parameter_count(int h) {
    return static_cast<std::size_t>(h) * kInputs + h + static_cast<std::size_t>(h) * h + h +
           static_cast<std::size_t>(kOutputs) * h + kOutputs;
  }

  int hidden() const { return hidden_; }
  std::uint64_t seed() const { return seed_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<double> w1() { return block(0, hidden_ * kInputs); }
  std::span<double> b1() { return block(off_b1(), hidden_); }
  std::span<double> w2() { return block(off_w2(), hidden_ * hidden_); }
  std::span<double> b2() { return block(off_b2(), hidden_); }
  std::span<double> w3() { return block(off_w3(), kOutputs * hidden_); }
  std::span<double> b3() { return block(off_b3(), kOutputs); }
  std::span<const double> w1() const { return cblock(0, hidden_ * kInputs); }
  std::span<const double> b1() const { return cblock(off_b1(), hidden_); }
  std::span<const double> w2() const { return cblock(off_w2(), hidden_ * hidden_); }
  std::span<const double> b2() const { return cblock(off_b2(), hidden_); }
  std::span<const double> w3() const { return cblock(off_w3(), kOutputs * hidden_); }
  std::span<const double> b3() const { return cblock(off_b3(), kOutputs); }

  /// Unclamped forward pass (the training-time output).
  Rgb forward_raw(const Rgb& surface, const Rgb& projected) const {
    const double in[kInputs] = {surface[0], surface[1], surface[2],
                                projected[0], projected[1], projected[2]};
    std::vector<double> h1(hidden_), h2(hidden_);
    const auto W1 = w1(), B1 = b1(), W2 = w2(), B2 = b2(), W3 = w3(), B3 = b3();
    for (int o = 0; o < hidden_; ++o) {
      double acc = B1[o];
      for (int i = 0; i < kInputs; ++i) acc += W1[o * kInputs + i] * in[i];
      h1[o] = acc > 0 ? acc : 0.0;
    }
    for (int o = 0; o < hidden_; ++o) {
      double acc = B2[o];
      for (int i = 0; i < hidden_; ++i) acc += W2[o * hidden_ + i] * h1[i];
      h2[o] = acc > 0 ? acc : 0.0;
    }
    Rgb out{};
    for (int o = 0; o < kOutputs; ++o) {
      double acc = B3[o];
      for (int i = 0; i < hidden_; ++i) acc += W3[o * hidden_ + i] * h2[i];
      out[o] = acc;
    }
    return out;
  }

  friend bool operator==(const ColorModel&, const ColorModel&) = default;

 private:
  std::size_t off_b1() const { return static_cast<std::size_t>(hidden_) * kInputs; }
  std::size_t off_w2() const { return off_b1() + hidden_; }
  std::size_t off_b2() const { return off_w2() + static_cast<std::size_t>(hidden_) * hidden_; }
  std::size_t off_w3() const { return off_b2() + hidden_; }
  std::size_t off_b3() const { return off_w3() + static_cast<std::size_t>(kOutputs) * hidden_; }
  std::span<double> block(std::size_t off, std::size_t n) { return std::span(params_).subspan(off, n); }
  std::span<const double> cblock(std::size_t off, std::size_t n) const {
    return std::span(params_).subspan(off, n);
  }

  int hidden_;
  std::uint64_t seed_;
  std::vector<double> params_;
};

/// Inference: forward pass clamped into [0, 1].
inline Rgb predict_color(const ColorModel& model, const Rgb& surface, const Rgb& projected) {
  Rgb out = model.forward_raw(surface, projected);
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// The model's parameters placed on a tape, watched or constant.
struct ColorModelVars {
  ad::Var w1, b1, w2, b2, w3, b3;
};

inline ColorModelVars bind_color_model(ad::Tape& tape, const ColorModel& m, bool watched) {
  const int h = m.hidden();
  auto put = [&](ad::Shape s, std::span<const double> v) {
    std::vector<double> values(v.begin(), v.end());
    return watched ? tape.variable(std::move(s), std::move(values))
                   : tape.constant(std::move(s), std::move(values));
  };
  return {put({h, ColorModel::kInputs}, m.w1()), put({h}, m.b1()),
          put({h, h}, m.w2()),                   put({h}, m.b2()),
          put({ColorModel::kOutputs, h}, m.w3()), put({ColorModel::kOutputs}, m.b3())};
}

/// inputs [N, 6] -> raw outputs [N, 3]; callers clamp at inference.
inline ad::Var color_forward(ad::Tape& tape, const ColorModelVars& p, ad::Var inputs) {
  ad::Var h1 = tape.relu(tape.dense(inputs, p.w1, p.b1));
  ad::Var h2 = tape.relu(tape.dense(h1, p.w2, p.b2));
  return tape.dense(h2, p.w3, p.b3);
}

/// Per-pixel prediction gated by the mask: mask * predict(surface, projected).
/// With a binary mask this is the prediction inside and 0 outside.
inline ImageBuffer apply_color_map(const ColorModel& model, const ImageBuffer& surface_img,
                                   const ImageBuffer& projected_img, const ImageBuffer& mask) {
  if (!surface_img.same_shape(projected_img) || !surface_img.same_shape(mask)) {
    throw InputError("apply_color_map: dimension mismatch");
  }
  ImageBuffer out(surface_img.height(), surface_img.width());
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const double m = mask.at(y, x, 0);
      if (m <= 0.0) continue;
      const Rgb pred = predict_color(model, surface_img.pixel(y, x), projected_img.pixel(y, x));
      for (int c = 0; c < 3; ++c) out.set(y, x, c, std::clamp(m * pred[c], 0.0, 1.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct ColorTrainConfig {
  int hidden = 32;
  int epochs = 400;
  double step_size = 0.01;
  int batch_size = 64;
  std::uint64_t seed = 7;
};

struct ColorTrainResult {
  ColorModel model;
  double final_loss = 0.0;             // mean L1 over the dataset after training
  std::vector<double> epoch_losses;    // mean minibatch L1 per epoch
};

/// Mean over samples of the summed absolute channel error, unclamped output.
inline double mean_l1_raw(const ColorModel& model, const ColorDataset& data) {
  double s = 0.0;
  for (const auto& smp : data.samples) {
    const Rgb o = model.forward_raw(smp.surface, smp.projected);
    for (int c = 0; c < 3; ++c) s += std::abs(o[c] - smp.observed[c]);
  }
  return data.samples.empty() ? 0.0 : s / data.samples.size();
}

/// Same metric with the inference clamp applied.
inline double mean_l1(const ColorModel& model, const ColorDataset& data) {
  double s = 0.0;
  for (const auto& smp : data.samples) {
    const Rgb o = predict_color(model, smp.surface, smp.projected);
    for (int c = 0; c < 3; ++c) s += std::abs(o[c] - smp.observed[c]);
  }
  return data.samples.empty() ? 0.0 : s / data.samples.size();
}

/// Minimizes the mean L1 error with Adam over seeded minibatches. The step
/// size follows a cosine schedule from `step_size` down to zero at the last
/// epoch.
inline ColorTrainResult train_color_model(const ColorDataset& data, const ColorTrainConfig& cfg) {
  if (data.samples.empty()) throw InputError("train_color_model: empty dataset");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.step_size > 0) || cfg.hidden < 1) {
    throw InputError("train_color_model: epochs, batch size, step size and width must be positive");
  }
  ColorTrainResult result{ColorModel::initialized(cfg.hidden, cfg.seed), 0.0, {}};
  ColorModel& model = result.model;
  Adam adam(model.params().size(), cfg.step_size);
  Rng rng(cfg.seed ^ 0xC0102ULL);

  const std::size_t n = data.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    adam.set_step_size(cfg.step_size * 0.5 *
                       (1.0 + std::cos(std::numbers::pi * epoch / std::max(1, cfg.epochs))));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - start);
      std::vector<double> in(count * 6), neg_target(count * 3);
      for (std::size_t k = 0; k < count; ++k) {
        const auto& s = data.samples[order[start + k]];
        for (int c = 0; c < 3; ++c) {
          in[k * 6 + c] = s.surface[c];
          in[k * 6 + 3 + c] = s.projected[c];
          neg_target[k * 3 + c] = -s.observed[c];
        }
      }
      ad::Tape tape;
      const ColorModelVars vars = bind_color_model(tape, model, true);
      ad::Var x = tape.constant({static_cast<int>(count), 6}, std::move(in));
      ad::Var out = color_forward(tape, vars, x);
      ad::Var err = tape.abs(tape.add_const(out, ad::make_constant(std::move(neg_target))));
      ad::Var loss = tape.scale(tape.sum(err), 1.0 / static_cast<double>(count));
      const double value = tape.scalar(loss);
      if (!std::isfinite(value)) {
        throw NumericalError("train_color_model: non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += value * count;
      const ad::Gradients g = tape.backward(loss);
      std::vector<double> grad;
      grad.reserve(model.params().size());
      for (ad::Var v : {vars.w1, vars.b1, vars.w2, vars.b2, vars.w3, vars.b3}) {
        const auto gv = g.of(v);
        grad.insert(grad.end(), gv.begin(), gv.end());
      }
      adam.step(model.params(), grad);
    }
    result.epoch_losses.push_back(epoch_loss / n);
  }
  result.final_loss = mean_l1_raw(model, data);
  if (!std::isfinite(result.final_loss)) throw NumericalError("train_color_model: diverged");
  return result;
}

// ---------------------------------------------------------------------------
// Simulated capture

/// O = clamp(surface_gain * S + projector_gain * P + offset), per channel.
struct CaptureLaw {
  std::string name;
  double surface_gain = 0.3;
  double projector_gain = 0.6;
  double offset = 0.05;

  Rgb operator()(const Rgb& s, const Rgb& p) const {
    Rgb o{};
    for (int c = 0; c < 3; ++c) {
      o[c] = std::clamp(surface_gain * s[c] + projector_gain * p[c] + offset, 0.0, 1.0);
    }
    return o;
  }
};

/// Named laws. Higher ambient light shrinks the projector's contribution.
inline CaptureLaw capture_law(const std::string& name) {
  if (name == "linear") return {name, 0.3, 0.6, 0.05};
  if (name == "100lux") return {name, 0.35, 0.6, 0.03};
  if (name == "200lux") return {name, 0.6, 0.35, 0.05};
  if (name == "500lux") return {name, 0.85, 0.12, 0.06};
  throw InputError("unknown capture law '" + name + "' (known: linear, 100lux, 200lux, 500lux)");
}

/// Seed of the held-out set that accompanies a synthesized training set.
inline std::uint64_t holdout_seed(std::uint64_t seed) { return seed + 7000; }

/// Uniformly random (S, P) pairs observed through `law`.
inline ColorDataset synthesize_random(const CaptureLaw& law, std::size_t count, std::uint64_t seed) {
  ColorDataset ds;
  ds.provenance = "synthetic law '" + law.name + "', uniform, seed " + std::to_string(seed);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    ColorSample s;
    for (double& v : s.surface) v = rng.uniform();
    for (double& v : s.projected) v = rng.uniform();
    s.observed = law(s.surface, s.projected);
    ds.samples.push_back(s);
  }
  return ds;
}

/// For each surface color, a levels^3 sweep of projected colors.
inline ColorDataset synthesize_sweep(const CaptureLaw& law, const std::vector<Rgb>& surfaces,
                                     int levels = 6) {
  ColorDataset ds;
  ds.provenance = "synthetic law '" + law.name + "', " + std::to_string(levels) + "^3 sweep over " +
                  std::to_string(surfaces.size()) + " surface colors";
  for (const Rgb& s : surfaces) {
    for (int r = 0; r < levels; ++r)
      for (int g = 0; g < levels; ++g)
        for (int b = 0; b < levels; ++b) {
          const Rgb p{r / double(levels - 1), g / double(levels - 1), b / double(levels - 1)};
          ds.samples.push_back({s, p, law(s, p)});
        }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Files

inline void save_color_dataset(const ColorDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "# " << ds.provenance << "\n# Sr Sg Sb Pr Pg Pb Or Og Ob\n";
  char buf[48];
  for (const auto& s : ds.samples) {
    bool first = true;
    for (const Rgb* v : {&s.surface, &s.projected, &s.observed}) {
      for (double x : *v) {
        std::snprintf(buf, sizeof buf, "%.17g", x);
        out << (first ? "" : " ") << buf;
        first = false;
      }
    }
    out << "\n";
  }
}

inline ColorDataset load_color_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing color dataset '" + path.string() + "'");
  ColorDataset ds;
  ds.provenance = path.string();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<double> v;
    double x;
    while (fields >> x) v.push_back(x);
    if (!fields.eof()) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
    if (v.empty()) continue;
    if (v.size() != 9) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected 9 values");
    }
    for (double c : v) {
      if (!(c >= 0.0 && c <= 1.0)) {
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": value outside [0,1]");
      }
    }
    ds.samples.push_back({{v[0], v[1], v[2]}, {v[3], v[4], v[5]}, {v[6], v[7], v[8]}});
  }
  return ds;
}

inline void save_color_model(const ColorModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << "projforge-color-model 1\n";
  out << "layers " << ColorModel::kInputs << " " << m.hidden() << " " << m.hidden() << " "
      << ColorModel::kOutputs << "\n";
  out << "seed " << m.seed() << "\n";
  char buf[48];
  auto rows = [&](const char* name, std::span<const double> v, int cols) {
    out << name << "\n";
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      out << buf << ((i + 1) % cols == 0 || i + 1 == v.size() ? "\n" : " ");
    }
  };
  rows("W1", m.w1(), ColorModel::kInputs);
  rows("b1", m.b1(), m.hidden());
  rows("W2", m.w2(), m.hidden());
  rows("b2", m.b2(), m.hidden());
  rows("W3", m.w3(), m.hidden());
  rows("b3", m.b3(), ColorModel::kOutputs);
}

inline ColorModel load_color_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("missing color model file '" + path.string() + "'");
  std::string magic, version, key;
  int l0 = 0, h = 0, h2 = 0, l3 = 0;
  std::uint64_t seed = 0;
  in >> magic >> version >> key >> l0 >> h >> h2 >> l3;
  if (magic != "projforge-color-model" || key != "layers" || l0 != 6 || h != h2 || l3 != 3 || h < 1) {
    throw InputError(path.string() + ": not a color model file");
  }
  in >> key >> seed;
  if (key != "seed") throw InputError(path.string() + ": missing seed");
  ColorModel m(h, seed);
  for (const char* name : {"W1", "b1", "W2", "b2", "W3", "b3"}) {
    in >> key;
    if (key != name) throw InputError(path.string() + ": expected block " + name);
    std::span<double> block = key == "W1"   ? m.w1()
                              : key == "b1" ? m.b1()
                              : key == "W2" ? m.w2()
                              : key == "b2" ? m.b2()
                              : key == "W3" ? m.w3()
                                            : m.b3();
    for (double& v : block) {
      if (!(in >> v)) throw InputError(path.string() + ": truncated block " + name);
    }
  }
  return m;
}

}  // namespace projforge
