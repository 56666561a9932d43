#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sbnet/ops.hpp"

namespace sbnet {

/// Named handle into a model's state. Buffers (running statistics) are saved
/// with checkpoints but never optimized.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool is_buffer = false;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// Deterministic parameter initializer.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Uniform in +-sqrt(6 / fan_in).
  template <typename T>
  Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    return uniform<T>(std::move(shape), bound);
  }

  template <typename T>
  Tensor<T> uniform(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    t.set_requires_grad();
    return t;
  }

  template <typename T>
  Tensor<T> constant(Shape shape, T value) {
    Tensor<T> t(std::move(shape), value);
    t.set_requires_grad();
    return t;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Initializer& init)
      : weight(init.kaiming_uniform<T>({out, in}, in)), bias(init.constant<T>({out}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, &bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + "weight", weight});
    out.push_back({prefix + "bias", bias});
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_,
         Initializer& init)
      : weight(init.kaiming_uniform<T>({out, in, kernel, kernel}, in * kernel * kernel)),
        bias(init.constant<T>({out}, T(0))),
        stride(stride_),
        padding(padding_) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, &bias, stride, padding); }

  std::size_t out_channels() const { return weight.dim(0); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + "weight", weight});
    out.push_back({prefix + "bias", bias});
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  mutable RunningStats<T> stats;  // written only by training-mode calls

  BatchNorm() = default;
  BatchNorm(std::size_t channels, Initializer& init)
      : gamma(init.constant<T>({channels}, T(1))), beta(init.constant<T>({channels}, T(0))), stats(channels) {}

  Tensor<T> operator()(const Tensor<T>& x, bool training) const { return batch_norm(x, gamma, beta, stats, training); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + "gamma", gamma});
    out.push_back({prefix + "beta", beta});
    out.push_back({prefix + "running_mean", stats.mean, true});
    out.push_back({prefix + "running_var", stats.var, true});
  }
};

/// Layer normalization over the last axis, composed from reductions and
/// element-wise arithmetic.
template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(std::size_t width, Initializer& init)
      : gamma(init.constant<T>({width}, T(1))), beta(init.constant<T>({width}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto centered = sub(x, mean(x, -1, true));
    auto var = mean(square(centered), -1, true);
    auto normed = div(centered, sqrt(add_scalar(var, eps)));
    return add(mul(normed, gamma), beta);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + "gamma", gamma});
    out.push_back({prefix + "beta", beta});
  }
};

}  // namespace sbnet
