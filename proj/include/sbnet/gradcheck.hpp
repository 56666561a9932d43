#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/nn.hpp"

namespace sbnet {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<tensor name>[<index>]"
};

namespace detail {

template <typename T, typename F>
double scalar_value(F& f) {
  NoTapeScope<T> off;
  Tensor<T> y = f();
  if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar, got " + to_string(y.shape()));
  return static_cast<double>(y[0]);
}

}  // namespace detail

/// Compares reverse-mode gradients of the scalar closure `f` with respect to
/// every tensor in `inputs` against central differences of step `h`.
/// At most `max_coords` coordinates per tensor are probed (0 = all), chosen
/// by a seeded shuffle.
template <typename T, typename F>
GradCheckReport grad_check_closure(F f, const ParamList<T>& inputs, double h, std::size_t max_coords = 0,
                                   std::uint64_t seed = 0) {
  if (!(h > 0)) throw std::invalid_argument("grad_check: step must be positive");
  for (const auto& in : inputs) in.tensor.node()->grad.clear();
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> y = f();
    if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar, got " + to_string(y.shape()));
    backward(y, tape);
  }
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (const auto& in : inputs) {
    if (in.is_buffer) continue;
    Tensor<T> x = in.tensor;
    const std::vector<T> analytic = x.has_grad() ? std::vector<T>(x.grad().begin(), x.grad().end())
                                                  : std::vector<T>(x.size(), T(0));
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (max_coords != 0 && order.size() > max_coords) {
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(max_coords);
    }
    for (std::size_t i : order) {
      const T saved = x[i];
      x[i] = static_cast<T>(saved + h);
      const double plus = detail::scalar_value<T>(f);
      x[i] = static_cast<T>(saved - h);
      const double minus = detail::scalar_value<T>(f);
      x[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.coordinates;
      if (report.worst.empty() || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = in.name + "[" + std::to_string(i) + "]";
      }
    }
    x.zero_grad();
  }
  return report;
}

/// Single-input form: f maps x to a scalar tensor.
template <typename T, typename F>
double grad_check(F f, Tensor<T> x, double h) {
  x.set_requires_grad();
  ParamList<T> inputs{{"x", x}};
  return grad_check_closure<T>([&]() { return f(x); }, inputs, h).max_relative_error;
}

}  // namespace sbnet
