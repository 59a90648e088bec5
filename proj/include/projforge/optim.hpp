#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "projforge/error.hpp"

namespace projforge {

/// Adaptive-moment (Adam) update over a flat parameter vector.
class Adam {
 public:
  explicit Adam(std::size_t size, double step_size, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8)
      : step_size_(step_size), beta1_(beta1), beta2_(beta2), epsilon_(epsilon), m_(size, 0.0),
        v_(size, 0.0) {}

  void set_step_size(double s) { step_size_ = s; }
  double step_size() const { return step_size_; }
  long iterations() const { return t_; }

  void step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) {
      throw InputError("Adam: parameter/gradient size mismatch");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      params[i] -= step_size_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + epsilon_);
    }
  }

 private:
  double step_size_;
  double beta1_;
  double beta2_;
  double epsilon_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace projforge
