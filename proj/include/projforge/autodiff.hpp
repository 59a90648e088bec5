#pragma once

// Reverse-mode differentiation over a closed set of tensor operators.
//
// A Tape records operators in execution order; every operator's inputs are
// earlier nodes, so the record is acyclic by construction. backward() walks
// the record once in reverse. Subgradient conventions at kinks:
//   relu'(0) = 0, clamp' = 1 strictly inside [lo, hi] and 0 elsewhere,
//   sign(0) = 0 for abs, total variation and p-norms, and the p-norm of an
//   all-zero input has zero gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "projforge/error.hpp"
#include "projforge/image.hpp"
#include "projforge/rng.hpp"

namespace projforge::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
};

using Constant = std::shared_ptr<const std::vector<double>>;

inline Constant make_constant(std::vector<double> values) {
  return std::make_shared<const std::vector<double>>(std::move(values));
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// tanh(v)/2 + 1/2, evaluated as sigmoid(2v) and held one rounding step
/// inside (0, 1) so saturated inputs never reach the endpoints.
inline double squash(double v) { return std::clamp(sigmoid(2.0 * v), 0x1p-53, 1.0 - 0x1p-53); }

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

namespace op {
struct Leaf {};
struct Add { int a, b; };
struct Sub { int a, b; };
struct Mul { int a, b; };
struct AddConst { int a; Constant c; };
struct MulConst { int a; Constant c; };
struct Affine { int a; double scale, shift; };
struct Relu { int a; };
struct Sigmoid { int a; };
struct Squash { int a; };
struct Clamp { int a; double lo, hi; };
struct Abs { int a; };
struct Sum { int a; };
struct PNorm { int a; double p; };
struct TotalVariation { int a; };
struct Map { int a; std::shared_ptr<const PixelMap> map; };
struct Reshape { int a; };
struct Concat { int a, b; };
struct Slice { int a; int begin, count; };
struct Dense { int x, w, b; };
struct Conv2d { int x, w, b; int stride, pad; };
struct BceWithLogits { int a; Constant target, weight; };
struct SquaredError { int a; Constant target, weight; };
}  // namespace op

using Op = std::variant<op::Leaf, op::Add, op::Sub, op::Mul, op::AddConst, op::MulConst, op::Affine,
                        op::Relu, op::Sigmoid, op::Squash, op::Clamp, op::Abs, op::Sum, op::PNorm,
                        op::TotalVariation, op::Map, op::Reshape, op::Concat, op::Slice, op::Dense,
                        op::Conv2d, op::BceWithLogits, op::SquaredError>;

/// Gradients of one backward pass, indexed by Var.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<double>> grads) : grads_(std::move(grads)) {}

  /// Empty for nodes that do not depend on any variable.
  std::span<const double> of(Var v) const& { return grads_.at(static_cast<std::size_t>(v.id)); }
  std::vector<double> of(Var v) && { return std::move(grads_.at(static_cast<std::size_t>(v.id))); }

 private:
  std::vector<std::vector<double>> grads_;
};

class Tape {
 public:
  // -- leaves --------------------------------------------------------------

  /// A watched input; gradients are reported for it.
  Var variable(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), true);
  }

  Var constant(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), false);
  }

  // -- elementwise ---------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    std::vector<double> out(val(a));
    const auto& vb = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(shp(a), std::move(out), op::Add{a.id, b.id}, {a, b});
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    std::vector<double> out(val(a));
    const auto& vb = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(shp(a), std::move(out), op::Sub{a.id, b.id}, {a, b});
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    std::vector<double> out(val(a));
    const auto& vb = val(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(shp(a), std::move(out), op::Mul{a.id, b.id}, {a, b});
  }

  Var add_const(Var a, Constant c) {
    check_len(c->size(), val(a).size(), "add_const");
    std::vector<double> out(val(a));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*c)[i];
    return push(shp(a), std::move(out), op::AddConst{a.id, std::move(c)}, {a});
  }

  Var mul_const(Var a, Constant c) {
    check_len(c->size(), val(a).size(), "mul_const");
    std::vector<double> out(val(a));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*c)[i];
    return push(shp(a), std::move(out), op::MulConst{a.id, std::move(c)}, {a});
  }

  /// scale * a + shift
  Var affine(Var a, double scale, double shift) {
    std::vector<double> out(val(a));
    for (double& v : out) v = scale * v + shift;
    return push(shp(a), std::move(out), op::Affine{a.id, scale, shift}, {a});
  }

  Var scale(Var a, double s) { return affine(a, s, 0.0); }

  Var relu(Var a) {
    std::vector<double> out(val(a));
    for (double& v : out) v = v > 0 ? v : 0.0;
    return push(shp(a), std::move(out), op::Relu{a.id}, {a});
  }

  Var sigmoid(Var a) {
    std::vector<double> out(val(a));
    for (double& v : out) v = ad::sigmoid(v);
    return push(shp(a), std::move(out), op::Sigmoid{a.id}, {a});
  }

  /// tanh(a) / 2 + 0.5, mapping the reals into (0, 1).
  Var squash(Var a) {
    std::vector<double> out(val(a));
    for (double& v : out) v = ad::squash(v);
    return push(shp(a), std::move(out), op::Squash{a.id}, {a});
  }

  Var clamp(Var a, double lo, double hi) {
    std::vector<double> out(val(a));
    for (double& v : out) v = std::clamp(v, lo, hi);
    return push(shp(a), std::move(out), op::Clamp{a.id, lo, hi}, {a});
  }

  Var abs(Var a) {
    std::vector<double> out(val(a));
    for (double& v : out) v = std::abs(v);
    return push(shp(a), std::move(out), op::Abs{a.id}, {a});
  }

  // -- reductions ----------------------------------------------------------

  Var sum(Var a) {
    double s = 0.0;
    for (double v : val(a)) s += v;
    return push({}, {s}, op::Sum{a.id}, {a});
  }

  /// (mean_i |a_i|^p)^(1/p)
  Var pnorm(Var a, double p) {
    if (!(p >= 1.0)) throw InputError("pnorm: order must be >= 1");
    const auto& v = val(a);
    double s = 0.0;
    for (double x : v) s += std::pow(std::abs(x), p);
    const double mean = v.empty() ? 0.0 : s / static_cast<double>(v.size());
    return push({}, {std::pow(mean, 1.0 / p)}, op::PNorm{a.id, p}, {a});
  }

  /// Sum of |differences| over horizontally and vertically adjacent pixels
  /// and all channels, divided by H * W. Input shape [H, W, C].
  Var total_variation(Var a) {
    const Shape& s = shp(a);
    if (s.size() != 3) throw InputError("total_variation: expected [H,W,C], got " + shape_str(s));
    const auto& v = val(a);
    const int h = s[0], w = s[1], c = s[2];
    double tv = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(y) * w + x) * c;
        for (int k = 0; k < c; ++k) {
          if (x + 1 < w) tv += std::abs(v[i + c + k] - v[i + k]);
          if (y + 1 < h) tv += std::abs(v[i + static_cast<std::size_t>(w) * c + k] - v[i + k]);
        }
      }
    }
    return push({}, {tv / (static_cast<double>(h) * w)}, op::TotalVariation{a.id}, {a});
  }

  // -- structural ----------------------------------------------------------

  /// Applies a pixel map to an [H, W, C] tensor.
  Var map(Var a, std::shared_ptr<const PixelMap> m) {
    const Shape& s = shp(a);
    if (s.size() != 3 || s[0] != m->in_height() || s[1] != m->in_width()) {
      throw InputError("map: input " + shape_str(s) + " does not match operator");
    }
    auto out = m->apply(val(a), s[2]);
    Shape os{m->out_height(), m->out_width(), s[2]};
    return push(std::move(os), std::move(out), op::Map{a.id, std::move(m)}, {a});
  }

  Var reshape(Var a, Shape shape) {
    check_len(numel(shape), val(a).size(), "reshape");
    return push(std::move(shape), val(a), op::Reshape{a.id}, {a});
  }

  /// Concatenates along the last dimension.
  Var concat(Var a, Var b) {
    const Shape& sa = shp(a);
    const Shape& sb = shp(b);
    if (sa.empty() || sa.size() != sb.size() ||
        !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
      throw InputError("concat: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t ca = sa.back(), cb = sb.back();
    const std::size_t rows = val(a).size() / ca;
    std::vector<double> out(rows * (ca + cb));
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(val(a).begin() + r * ca, ca, out.begin() + r * (ca + cb));
      std::copy_n(val(b).begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
    }
    Shape os = sa;
    os.back() = static_cast<int>(ca + cb);
    return push(std::move(os), std::move(out), op::Concat{a.id, b.id}, {a, b});
  }

  /// Slice [begin, begin + count) of the last dimension.
  Var slice(Var a, int begin, int count) {
    const Shape& s = shp(a);
    if (s.empty() || begin < 0 || count < 1 || begin + count > s.back()) {
      throw InputError("slice: range out of bounds for " + shape_str(s));
    }
    const std::size_t c = s.back();
    const std::size_t rows = val(a).size() / c;
    std::vector<double> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(val(a).begin() + r * c + begin, count, out.begin() + r * count);
    }
    Shape os = s;
    os.back() = count;
    return push(std::move(os), std::move(out), op::Slice{a.id, begin, count}, {a});
  }

  // -- layers --------------------------------------------------------------

  /// x [N, in], w [out, in], b [out] -> [N, out]
  Var dense(Var x, Var w, Var b) {
    const Shape& sx = shp(x);
    const Shape& sw = shp(w);
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1] || shp(b) != Shape{sw[0]}) {
      throw InputError("dense: incompatible shapes " + shape_str(sx) + " " + shape_str(sw) + " " +
                       shape_str(shp(b)));
    }
    const int n = sx[0], in = sx[1], outc = sw[0];
    const auto& vx = val(x);
    const auto& vw = val(w);
    const auto& vb = val(b);
    std::vector<double> out(static_cast<std::size_t>(n) * outc);
    for (int r = 0; r < n; ++r) {
      const double* xr = vx.data() + static_cast<std::size_t>(r) * in;
      for (int o = 0; o < outc; ++o) {
        const double* wr = vw.data() + static_cast<std::size_t>(o) * in;
        double acc = vb[o];
        for (int i = 0; i < in; ++i) acc += wr[i] * xr[i];
        out[static_cast<std::size_t>(r) * outc + o] = acc;
      }
    }
    return push({n, outc}, std::move(out), op::Dense{x.id, w.id, b.id}, {x, w, b});
  }

  /// x [H, W, Ci], w [Co, K, K, Ci], b [Co] -> [H', W', Co] with zero padding.
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Shape& sx = shp(x);
    const Shape& sw = shp(w);
    if (sx.size() != 3 || sw.size() != 4 || sw[1] != sw[2] || sw[3] != sx[2] ||
        shp(b) != Shape{sw[0]} || stride < 1 || pad < 0) {
      throw InputError("conv2d: incompatible shapes " + shape_str(sx) + " " + shape_str(sw));
    }
    const int h = sx[0], wd = sx[1], ci = sx[2], co = sw[0], k = sw[1];
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (wd + 2 * pad - k) / stride + 1;
    if (oh < 1 || ow < 1) throw InputError("conv2d: input too small");
    const auto& vx = val(x);
    const auto& vw = val(w);
    const auto& vb = val(b);
    std::vector<double> out(static_cast<std::size_t>(oh) * ow * co);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double* dst = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * co;
        for (int o = 0; o < co; ++o) dst[o] = vb[o];
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            const double* src = vx.data() + (static_cast<std::size_t>(iy) * wd + ix) * ci;
            for (int o = 0; o < co; ++o) {
              const double* wk = vw.data() + ((static_cast<std::size_t>(o) * k + ky) * k + kx) * ci;
              double acc = 0.0;
              for (int c = 0; c < ci; ++c) acc += wk[c] * src[c];
              dst[o] += acc;
            }
          }
        }
      }
    }
    return push({oh, ow, co}, std::move(out), op::Conv2d{x.id, w.id, b.id, stride, pad}, {x, w, b});
  }

  // -- losses --------------------------------------------------------------

  /// sum_i weight_i * BCE(sigmoid(a_i), target_i), computed from logits.
  Var bce_with_logits(Var a, Constant target, Constant weight) {
    check_len(target->size(), val(a).size(), "bce_with_logits");
    check_len(weight->size(), val(a).size(), "bce_with_logits");
    const auto& z = val(a);
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      if ((*weight)[i] == 0.0) continue;
      s += (*weight)[i] * (std::max(z[i], 0.0) - z[i] * (*target)[i] + std::log1p(std::exp(-std::abs(z[i]))));
    }
    return push({}, {s}, op::BceWithLogits{a.id, std::move(target), std::move(weight)}, {a});
  }

  /// sum_i weight_i * (a_i - target_i)^2
  Var squared_error(Var a, Constant target, Constant weight) {
    check_len(target->size(), val(a).size(), "squared_error");
    check_len(weight->size(), val(a).size(), "squared_error");
    const auto& v = val(a);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = v[i] - (*target)[i];
      s += (*weight)[i] * d * d;
    }
    return push({}, {s}, op::SquaredError{a.id, std::move(target), std::move(weight)}, {a});
  }

  // -- access --------------------------------------------------------------

  const std::vector<double>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).shape; }
  double scalar(Var v) const {
    if (node(v).value.size() != 1) throw InputError("scalar: node is not a scalar");
    return node(v).value[0];
  }
  bool depends_on_variables(Var v) const { return node(v).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar output. A tape supports exactly one pass.
  Gradients backward(Var loss) {
    if (used_) throw InputError("backward: tape already consumed");
    const Node& out = node(loss);
    if (out.value.size() != 1) {
      throw InputError("backward: output must be a scalar, got shape " + shape_str(out.shape));
    }
    used_ = true;
    std::vector<std::vector<double>> grads(nodes_.size());
    for (std::size_t i = 0; i <= static_cast<std::size_t>(loss.id); ++i) {
      if (nodes_[i].needs_grad) grads[i].assign(nodes_[i].value.size(), 0.0);
    }
    if (!out.needs_grad) return Gradients(std::move(grads));
    grads[loss.id][0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      const Node& n = nodes_[i];
      if (!n.needs_grad) continue;
      std::visit([&](const auto& o) { backprop(o, n, grads[i], grads); }, n.op);
    }
    return Gradients(std::move(grads));
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    Op op;
    bool needs_grad = false;
  };
  using GradStore = std::vector<std::vector<double>>;

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw InputError("tape: invalid variable handle");
    }
    return nodes_[v.id];
  }
  const std::vector<double>& val(Var v) const { return node(v).value; }
  const Shape& shp(Var v) const { return node(v).shape; }

  Var leaf(Shape shape, std::vector<double> values, bool watched) {
    check_len(values.size(), numel(shape), "leaf");
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericalError("tape: non-finite leaf value");
    }
    nodes_.push_back({std::move(shape), std::move(values), op::Leaf{}, watched});
    return {static_cast<int>(nodes_.size() - 1)};
  }

  Var push(Shape shape, std::vector<double> value, Op o, std::initializer_list<Var> inputs) {
    if (used_) throw InputError("tape: cannot record after backward");
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).needs_grad;
    nodes_.push_back({std::move(shape), std::move(value), std::move(o), needs});
    return {static_cast<int>(nodes_.size() - 1)};
  }

  void same_shape(Var a, Var b, const char* what) const {
    if (shp(a) != shp(b)) {
      throw InputError(std::string(what) + ": shape mismatch " + shape_str(shp(a)) + " vs " +
                       shape_str(shp(b)));
    }
  }
  static void check_len(std::size_t got, std::size_t want, const char* what) {
    if (got != want) {
      throw InputError(std::string(what) + ": length " + std::to_string(got) + ", expected " +
                       std::to_string(want));
    }
  }

  bool wants(int id) const { return nodes_[id].needs_grad; }

  // -- per-operator reverse rules -----------------------------------------

  void backprop(const op::Leaf&, const Node&, const std::vector<double>&, GradStore&) const {}

  void backprop(const op::Add& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    if (wants(o.a)) for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i];
    if (wants(o.b)) for (std::size_t i = 0; i < g.size(); ++i) gs[o.b][i] += g[i];
  }
  void backprop(const op::Sub& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    if (wants(o.a)) for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i];
    if (wants(o.b)) for (std::size_t i = 0; i < g.size(); ++i) gs[o.b][i] -= g[i];
  }
  void backprop(const op::Mul& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const auto& va = nodes_[o.a].value;
    const auto& vb = nodes_[o.b].value;
    if (wants(o.a)) for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i] * vb[i];
    if (wants(o.b)) for (std::size_t i = 0; i < g.size(); ++i) gs[o.b][i] += g[i] * va[i];
  }
  void backprop(const op::AddConst& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i];
  }
  void backprop(const op::MulConst& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i] * (*o.c)[i];
  }
  void backprop(const op::Affine& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i] * o.scale;
  }
  void backprop(const op::Relu& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const auto& x = nodes_[o.a].value;
    for (std::size_t i = 0; i < g.size(); ++i) if (x[i] > 0) gs[o.a][i] += g[i];
  }
  void backprop(const op::Sigmoid& o, const Node& n, const std::vector<double>& g, GradStore& gs) const {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = n.value[i];
      gs[o.a][i] += g[i] * s * (1.0 - s);
    }
  }
  void backprop(const op::Squash& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const auto& x = nodes_[o.a].value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = std::tanh(x[i]);
      gs[o.a][i] += g[i] * 0.5 * (1.0 - t * t);
    }
  }
  void backprop(const op::Clamp& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const auto& x = nodes_[o.a].value;
    for (std::size_t i = 0; i < g.size(); ++i) if (x[i] > o.lo && x[i] < o.hi) gs[o.a][i] += g[i];
  }
  void backprop(const op::Abs& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const auto& x = nodes_[o.a].value;
    for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i] * sign(x[i]);
  }
  void backprop(const op::Sum& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    for (double& d : gs[o.a]) d += g[0];
  }
  void backprop(const op::PNorm& o, const Node& n, const std::vector<double>& g, GradStore& gs) const {
    const auto& x = nodes_[o.a].value;
    const double norm = n.value[0];
    if (norm == 0.0 || x.empty()) return;
    const double count = static_cast<double>(x.size());
    // d/dx_i (mean |x|^p)^(1/p) = norm^(1-p) |x_i|^(p-1) sign(x_i) / N
    const double factor = g[0] * std::pow(norm, 1.0 - o.p) / count;
    for (std::size_t i = 0; i < x.size(); ++i) {
      gs[o.a][i] += factor * std::pow(std::abs(x[i]), o.p - 1.0) * sign(x[i]);
    }
  }
  void backprop(const op::TotalVariation& o, const Node&, const std::vector<double>& g,
                GradStore& gs) const {
    const Shape& s = nodes_[o.a].shape;
    const auto& v = nodes_[o.a].value;
    auto& d = gs[o.a];
    const int h = s[0], w = s[1], c = s[2];
    const double scale = g[0] / (static_cast<double>(h) * w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(y) * w + x) * c;
        for (int k = 0; k < c; ++k) {
          if (x + 1 < w) {
            const double sg = scale * sign(v[i + c + k] - v[i + k]);
            d[i + c + k] += sg;
            d[i + k] -= sg;
          }
          if (y + 1 < h) {
            const std::size_t j = i + static_cast<std::size_t>(w) * c + k;
            const double sg = scale * sign(v[j] - v[i + k]);
            d[j] += sg;
            d[i + k] -= sg;
          }
        }
      }
    }
  }
  void backprop(const op::Map& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    o.map->apply_transpose_add(g, gs[o.a], nodes_[o.a].shape[2]);
  }
  void backprop(const op::Reshape& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    for (std::size_t i = 0; i < g.size(); ++i) gs[o.a][i] += g[i];
  }
  void backprop(const op::Concat& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const std::size_t ca = nodes_[o.a].shape.back(), cb = nodes_[o.b].shape.back();
    const std::size_t rows = nodes_[o.a].value.size() / ca;
    for (std::size_t r = 0; r < rows; ++r) {
      if (wants(o.a)) for (std::size_t k = 0; k < ca; ++k) gs[o.a][r * ca + k] += g[r * (ca + cb) + k];
      if (wants(o.b)) for (std::size_t k = 0; k < cb; ++k) gs[o.b][r * cb + k] += g[r * (ca + cb) + ca + k];
    }
  }
  void backprop(const op::Slice& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const std::size_t c = nodes_[o.a].shape.back();
    const std::size_t rows = nodes_[o.a].value.size() / c;
    for (std::size_t r = 0; r < rows; ++r)
      for (int k = 0; k < o.count; ++k) gs[o.a][r * c + o.begin + k] += g[r * o.count + k];
  }
  void backprop(const op::Dense& o, const Node&, const std::vector<double>& g, GradStore& gs) const {
    const Shape& sx = nodes_[o.x].shape;
    const Shape& sw = nodes_[o.w].shape;
    const int n = sx[0], in = sx[1], outc = sw[0];
    const auto& vx = nodes_[o.x].value;
    const auto& vw = nodes_[o.w].value;
    const bool gx = wants(o.x), gw = wants(o.w), gb = wants(o.b);
    for (int r = 0; r < n; ++r) {
      const double* xr = vx.data() + static_cast<std::size_t>(r) * in;
      for (int oc = 0; oc < outc; ++oc) {
        const double go = g[static_cast<std::size_t>(r) * outc + oc];
        if (go == 0.0) continue;
        if (gb) gs[o.b][oc] += go;
        const double* wr = vw.data() + static_cast<std::size_t>(oc) * in;
        if (gw) {
          double* dw = gs[o.w].data() + static_cast<std::size_t>(oc) * in;
          for (int i = 0; i < in; ++i) dw[i] += go * xr[i];
        }
        if (gx) {
          double* dx = gs[o.x].data() + static_cast<std::size_t>(r) * in;
          for (int i = 0; i < in; ++i) dx[i] += go * wr[i];
        }
      }
    }
  }
  void backprop(const op::Conv2d& o, const Node& n, const std::vector<double>& g, GradStore& gs) const {
    const Shape& sx = nodes_[o.x].shape;
    const Shape& sw = nodes_[o.w].shape;
    const int h = sx[0], wd = sx[1], ci = sx[2], co = sw[0], k = sw[1];
    const int oh = n.shape[0], ow = n.shape[1];
    const auto& vx = nodes_[o.x].value;
    const auto& vw = nodes_[o.w].value;
    const bool gx = wants(o.x), gw = wants(o.w), gb = wants(o.b);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double* go = g.data() + (static_cast<std::size_t>(oy) * ow + ox) * co;
        if (gb) for (int oc = 0; oc < co; ++oc) gs[o.b][oc] += go[oc];
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * o.stride - o.pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * o.stride - o.pad + kx;
            if (ix < 0 || ix >= wd) continue;
            const std::size_t xoff = (static_cast<std::size_t>(iy) * wd + ix) * ci;
            const double* src = vx.data() + xoff;
            for (int oc = 0; oc < co; ++oc) {
              const double gv = go[oc];
              if (gv == 0.0) continue;
              const std::size_t woff = ((static_cast<std::size_t>(oc) * k + ky) * k + kx) * ci;
              if (gw) {
                double* dw = gs[o.w].data() + woff;
                for (int c = 0; c < ci; ++c) dw[c] += gv * src[c];
              }
              if (gx) {
                double* dx = gs[o.x].data() + xoff;
                const double* wk = vw.data() + woff;
                for (int c = 0; c < ci; ++c) dx[c] += gv * wk[c];
              }
            }
          }
        }
      }
    }
  }
  void backprop(const op::BceWithLogits& o, const Node&, const std::vector<double>& g,
                GradStore& gs) const {
    const auto& z = nodes_[o.a].value;
    for (std::size_t i = 0; i < z.size(); ++i) {
      gs[o.a][i] += g[0] * (*o.weight)[i] * (ad::sigmoid(z[i]) - (*o.target)[i]);
    }
  }
  void backprop(const op::SquaredError& o, const Node&, const std::vector<double>& g,
                GradStore& gs) const {
    const auto& v = nodes_[o.a].value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      gs[o.a][i] += g[0] * 2.0 * (*o.weight)[i] * (v[i] - (*o.target)[i]);
    }
  }

  std::vector<Node> nodes_;
  bool used_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference audit

/// A scalar function of a flat parameter vector. When `grad` is non-null the
/// function also writes its reverse-mode gradient there.
using ScalarFunction = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

struct GradientCheckReport {
  std::size_t checked = 0;
  double worst_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

/// Compares the reverse-mode gradient with central differences on `samples`
/// seeded coordinates (all coordinates if there are fewer). Relative error
/// is |a - n| / max(|a|, |n|, floor).
inline GradientCheckReport check_gradients(const ScalarFunction& fn, std::vector<double> point,
                                           double step, double tolerance, std::size_t samples,
                                           std::uint64_t seed, double floor = 1e-6) {
  GradientCheckReport report;
  report.tolerance = tolerance;
  std::vector<double> analytic;
  fn(point, &analytic);
  if (analytic.size() != point.size()) {
    report.passed = false;
    report.worst_relative_error = INFINITY;
    return report;
  }
  std::vector<std::size_t> coords(point.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (samples < coords.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < samples; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(samples);
  }
  for (std::size_t idx : coords) {
    const double orig = point[idx];
    point[idx] = orig + step;
    const double up = fn(point, nullptr);
    point[idx] = orig - step;
    const double down = fn(point, nullptr);
    point[idx] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (report.checked == 1 || !(rel <= report.worst_relative_error)) {
      report.worst_relative_error = rel;
      report.worst_index = idx;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.worst_relative_error <= tolerance;
  return report;
}

}  // namespace projforge::ad
