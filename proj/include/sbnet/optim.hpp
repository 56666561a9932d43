#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/nn.hpp"

namespace sbnet {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 3e-5;  // decoupled
};

/// Adam with bias correction and decoupled weight decay. Moment buffers are
/// kept per parameter in registration order.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions options) : options_(options) {
    for (auto& p : params) {
      if (p.is_buffer) continue;
      params_.push_back(p);
      first_.emplace_back(p.tensor.size(), T(0));
      second_.emplace_back(p.tensor.size(), T(0));
    }
  }

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::size_t step_count() const { return step_; }
  const AdamOptions& options() const { return options_; }

  /// Applies one update and zeroes the gradients.
  void step() {
    for (auto& p : params_) {
      if (p.tensor.size() != 0 && !p.tensor.has_grad()) {
        throw std::runtime_error("adam: parameter '" + p.name + "' has no gradient");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto data = params_[k].tensor.data();
      auto grad = params_[k].tensor.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad[i];
        m[i] = static_cast<T>(options_.beta1 * m[i] + (1.0 - options_.beta1) * g);
        v[i] = static_cast<T>(options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g);
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        double updated = data[i] - options_.lr * options_.weight_decay * data[i];
        updated -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
        data[i] = static_cast<T>(updated);
      }
      params_[k].tensor.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  AdamOptions options_;
  ParamList<T> params_;
  std::vector<std::vector<T>> first_, second_;
  std::size_t step_ = 0;
};

/// Learning rate divided by 10 at each listed epoch (0-based epoch index).
inline double step_decay_lr(double base_lr, const std::vector<int>& drop_epochs, int epoch) {
  double lr = base_lr;
  for (int d : drop_epochs) {
    if (epoch >= d) lr /= 10.0;
  }
  return lr;
}

}  // namespace sbnet
