#pragma once

// Differentiable primitives. Every op records its adjoint on the active tape
// when an input requires a gradient; otherwise it is a plain forward kernel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "sbnet/tensor.hpp"

namespace sbnet {

/// Guard for divisions and logarithms.
template <typename T>
constexpr T kEps = T(1e-8);

/// Largest value strictly below one that keeps log(1 - x) finite.
template <typename T>
inline T upper_unit_bound() {
  const T candidate = T(1) - kEps<T>;
  return candidate < T(1) ? candidate : std::nextafter(T(1), T(0));
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
std::vector<T>* grad_sink(const std::shared_ptr<TensorNode<T>>& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return &node->grad;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;

  static std::vector<std::size_t> strides_for(const Shape& padded, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t running = 1;
    for (std::size_t d = out.size(); d-- > 0;) {
      strides[d] = (padded[d] == 1 && out[d] != 1) ? 0 : running;
      running *= padded[d];
    }
    return strides;
  }

  Broadcast(const Shape& a, const Shape& b) {
    const std::size_t r = std::max<std::size_t>({a.size(), b.size(), 1});
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
    out.resize(r);
    for (std::size_t d = 0; d < r; ++d) {
      if (pa[d] == pb[d] || pb[d] == 1) {
        out[d] = pa[d];
      } else if (pa[d] == 1) {
        out[d] = pb[d];
      } else {
        throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
      }
    }
    stride_a = strides_for(pa, out);
    stride_b = strides_for(pb, out);
    if (a.empty() && b.empty()) out.clear();
  }

  // f(out_index, a_index, b_index)
  template <typename F>
  void for_each(F&& f) const {
    const std::size_t r = std::max<std::size_t>(out.size(), 1);
    Shape full = out.empty() ? Shape{1} : out;
    const std::size_t n = numel(full);
    if (n == 0) return;
    const std::size_t inner = full[r - 1];
    const std::size_t sa = stride_a[r - 1], sb = stride_b[r - 1];
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; o += inner) {
      for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * sa, ib + j * sb);
      for (std::size_t d = r - 1; d-- > 0;) {
        ++idx[d];
        ia += stride_a[d];
        ib += stride_b[d];
        if (idx[d] < full[d]) break;
        ia -= stride_a[d] * full[d];
        ib -= stride_b[d] * full[d];
        idx[d] = 0;
      }
    }
  }
};

// Elementwise binary op with broadcasting; da/db give local partials.
template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  Broadcast plan(a.shape(), b.shape());
  auto out = make_output<T>(plan.out, a, b);
  {
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i], y[i]);
    } else {
      plan.for_each([&](std::size_t io, std::size_t ia, std::size_t ib) { o[io] = fwd(x[ia], y[ib]); });
    }
  }
  if (recording(out)) {
    record(out, [an = a.node(), bn = b.node(), on = out.node(), plan, da, db]() {
      auto* ga = grad_sink(an);
      auto* gb = grad_sink(bn);
      const auto& x = an->data;
      const auto& y = bn->data;
      const auto& go = on->grad;
      plan.for_each([&](std::size_t io, std::size_t ia, std::size_t ib) {
        if (ga) (*ga)[ia] += go[io] * da(x[ia], y[ib]);
        if (gb) (*gb)[ib] += go[io] * db(x[ia], y[ib]);
      });
    });
  }
  return out;
}

// Elementwise unary op; df(x, y) is the local derivative given input and output.
template <typename T, typename Fwd, typename DF>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, DF df) {
  auto out = make_output<T>(x.shape(), x);
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(in[i]);
  if (recording(out)) {
    record(out, [xn = x.node(), on = out.node(), df]() {
      auto* gx = grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        (*gx)[i] += on->grad[i] * df(xn->data[i], on->data[i]);
      }
    });
  }
  return out;
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range");
  return static_cast<std::size_t>(axis);
}

// Splits a shape around `axis` into (outer, axis length, inner) extents.
inline void split_around(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                         std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  len = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
inline T guard_denominator(T d) {
  return d >= T(0) ? std::max(d, kEps<T>) : std::min(d, -kEps<T>);
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, [](T x, T y) { return x / guard_denominator(y); },
      [](T, T y) { return T(1) / guard_denominator(y); },
      [](T x, T y) {
        const T d = guard_denominator(y);
        return -x / (d * d);
      });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary(x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::sqrt(std::max(v, T(0))); },
      [](T, T y) { return T(0.5) / std::max(y, kEps<T>); });
}

/// Natural log with the argument floored at eps.
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::log(std::max(v, kEps<T>)); },
      [](T v, T) { return v > kEps<T> ? T(1) / v : T(0); });
}

/// Clamp whose adjoint passes gradients straight through.
template <typename T>
Tensor<T> clamp_straight_through(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(x, [lo, hi](T v) { return std::clamp(v, lo, hi); }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  return detail::unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Softmax along `axis` with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
  if (x.rank() == 0) throw ShapeError("degenerate softmax axis");
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  std::size_t outer, len, inner;
  detail::split_around(x.shape(), ax, outer, len, inner);
  if (len == 0) throw ShapeError("degenerate softmax axis");
  auto out = detail::make_output<T>(x.shape(), x);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      T mx = in[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(in[base + k * inner] - mx);
        o[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) o[base + k * inner] /= total;
    }
  }
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), on = out.node(), outer, len, inner]() {
      auto* gx = detail::grad_sink(xn);
      if (!gx) return;
      const auto& y = on->data;
      const auto& gy = on->grad;
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          T dot = 0;
          for (std::size_t k = 0; k < len; ++k) dot += gy[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = base + k * inner;
            (*gx)[i] += y[i] * (gy[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  auto out = detail::make_output<T>(std::move(shape), x);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), on = out.node()]() {
      auto* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) (*gx)[i] += on->grad[i];
    });
  }
  return out;
}

/// General axis permutation; out.shape[i] == x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permutation rank mismatch");
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r), src_strides(r);
  {
    std::size_t s = 1;
    for (std::size_t d = r; d-- > 0;) {
      in_strides[d] = s;
      s *= x.shape()[d];
    }
  }
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw ShapeError("invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  // out index -> source offset
  const std::size_t n = x.size();
  std::vector<std::size_t> mapping(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      mapping[o] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += src_strides[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  auto out = detail::make_output<T>(out_shape, x);
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) o[i] = in[mapping[i]];
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), on = out.node(), mapping = std::move(mapping)]() {
      auto* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < mapping.size(); ++i) (*gx)[mapping[i]] += on->grad[i];
    });
  }
  return out;
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<std::size_t> perm(x.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

/// Contiguous range [start, start + length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  std::size_t outer, len, inner;
  detail::split_around(x.shape(), ax, outer, len, inner);
  if (start + length > len) throw ShapeError("slice out of range");
  Shape shape = x.shape();
  shape[ax] = length;
  auto out = detail::make_output<T>(shape, x);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    std::copy_n(in.begin() + (a * len + start) * inner, length * inner, o.begin() + a * length * inner);
  }
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), on = out.node(), outer, len, inner, start, length]() {
      auto* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t k = 0; k < length * inner; ++k) {
          (*gx)[(a * len + start) * inner + k] += on->grad[a * length * inner + k];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t ax = detail::normalize_axis(axis, parts.front().rank());
  Shape shape = parts.front().shape();
  shape[ax] = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (d != ax && p.shape()[d] != parts.front().shape()[d]) {
        throw ShapeError("concat shape mismatch: " + to_string(p.shape()) + " vs " +
                         to_string(parts.front().shape()));
      }
    }
    shape[ax] += p.shape()[ax];
    any_grad = any_grad || p.requires_grad();
  }
  std::size_t outer, len, inner;
  detail::split_around(shape, ax, outer, len, inner);
  Tensor<T> out(shape);
  if (detail::active_tape<T>() != nullptr && any_grad) out.set_requires_grad();
  auto o = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t plen = p.shape()[ax];
    auto in = p.data();
    for (std::size_t a = 0; a < outer; ++a) {
      std::copy_n(in.begin() + a * plen * inner, plen * inner, o.begin() + (a * len + offset) * inner);
    }
    offset += plen;
  }
  if (detail::recording(out)) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    detail::record(out, [nodes, on = out.node(), ax, outer, len, inner]() {
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        const std::size_t plen = n->shape[ax];
        if (auto* g = detail::grad_sink(n)) {
          for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t k = 0; k < plen * inner; ++k) {
              (*g)[a * plen * inner + k] += on->grad[(a * len + offset) * inner + k];
            }
          }
        }
        offset += plen;
      }
    });
  }
  return out;
}

/// Row gather: table (V, d), ids of shape `id_shape` -> id_shape + (d).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& ids, Shape id_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  if (numel(id_shape) != ids.size()) throw ShapeError("embedding id shape mismatch");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab));
    }
  }
  Shape shape = id_shape;
  shape.push_back(width);
  auto out = detail::make_output<T>(shape, table);
  auto o = out.data();
  auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(t.begin() + ids[i] * width, width, o.begin() + i * width);
  }
  if (detail::recording(out)) {
    detail::record(out, [tn = table.node(), on = out.node(), ids, width]() {
      auto* g = detail::grad_sink(tn);
      if (!g) return;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t k = 0; k < width; ++k) (*g)[ids[i] * width + k] += on->grad[i * width + k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  std::size_t outer, len, inner;
  detail::split_around(x.shape(), ax, outer, len, inner);
  Shape shape = x.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + ax);
  }
  auto out = detail::make_output<T>(shape, x);
  auto in = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a) {
    for (std::size_t k = 0; k < len; ++k) {
      const T* src = in.data() + (a * len + k) * inner;
      T* dst = o.data() + a * inner;
      for (std::size_t c = 0; c < inner; ++c) dst[c] += src[c];
    }
  }
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), on = out.node(), outer, len, inner]() {
      auto* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t k = 0; k < len; ++k) {
          for (std::size_t c = 0; c < inner; ++c) (*gx)[(a * len + k) * inner + c] += on->grad[a * inner + c];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const std::size_t len = x.shape()[ax];
  if (len == 0) throw ShapeError("mean over empty axis");
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(len));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = detail::make_output<T>(Shape{}, x);
  T total = 0;
  for (T v : x.data()) total += v;
  out[0] = total;
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), on = out.node()]() {
      auto* gx = detail::grad_sink(xn);
      if (!gx) return;
      for (auto& g : *gx) g += on->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product: (..., m, k) x (..., k, n). Either side may be a
/// plain matrix shared across the other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape()[b.rank() - 1];
  if (k != kb) {
    throw ShapeError("matmul inner mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  bool share_a = false, share_b = false;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_b.empty()) {
    batch = batch_a;
    share_b = true;
  } else if (batch_a.empty()) {
    batch = batch_b;
    share_a = true;
  } else {
    throw ShapeError("matmul batch mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t count = numel(batch);
  Shape shape = batch;
  shape.push_back(m);
  shape.push_back(n);
  auto out = detail::make_output<T>(shape, a, b);

  // Shared right operand: fold the batch into rows for one large product.
  if (share_b) {
    detail::ConstMatMap<T> A(a.data().data(), count * m, k);
    detail::ConstMatMap<T> B(b.data().data(), k, n);
    detail::MatMap<T> C(out.data().data(), count * m, n);
    C.noalias() = A * B;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      detail::ConstMatMap<T> A(a.data().data() + (share_a ? 0 : i * m * k), m, k);
      detail::ConstMatMap<T> B(b.data().data() + i * k * n, k, n);
      detail::MatMap<T> C(out.data().data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
  }
  if (detail::recording(out)) {
    detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n, count, share_a, share_b]() {
      auto* ga = detail::grad_sink(an);
      auto* gb = detail::grad_sink(bn);
      if (share_b) {
        detail::ConstMatMap<T> G(on->grad.data(), count * m, n);
        if (ga) {
          detail::MatMap<T> GA(ga->data(), count * m, k);
          GA.noalias() += G * detail::ConstMatMap<T>(bn->data.data(), k, n).transpose();
        }
        if (gb) {
          detail::MatMap<T> GB(gb->data(), k, n);
          GB.noalias() += detail::ConstMatMap<T>(an->data.data(), count * m, k).transpose() * G;
        }
        return;
      }
      for (std::size_t i = 0; i < count; ++i) {
        detail::ConstMatMap<T> G(on->grad.data() + i * m * n, m, n);
        const std::size_t off_a = share_a ? 0 : i * m * k;
        if (ga) {
          detail::MatMap<T> GA(ga->data() + off_a, m, k);
          GA.noalias() += G * detail::ConstMatMap<T>(bn->data.data() + i * k * n, k, n).transpose();
        }
        if (gb) {
          detail::MatMap<T> GB(gb->data() + i * k * n, k, n);
          GB.noalias() += detail::ConstMatMap<T>(an->data.data() + off_a, m, k).transpose() * G;
        }
      }
    });
  }
  return out;
}

/// x (..., in) with weight (out, in) and optional bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const std::size_t in = weight.dim(1), outw = weight.dim(0);
  const std::size_t rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outw;
  auto out = bias ? detail::make_output<T>(shape, x, weight, *bias) : detail::make_output<T>(shape, x, weight);
  detail::ConstMatMap<T> X(x.data().data(), rows, in);
  detail::ConstMatMap<T> W(weight.data().data(), outw, in);
  detail::MatMap<T> Y(out.data().data(), rows, outw);
  Y.noalias() = X * W.transpose();
  if (bias) {
    if (bias->size() != outw) throw ShapeError("linear bias size mismatch");
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B(bias->data().data(), outw);
    Y.rowwise() += B;
  }
  if (detail::recording(out)) {
    auto bn = bias ? bias->node() : nullptr;
    detail::record(out, [xn = x.node(), wn = weight.node(), bn, on = out.node(), rows, in, outw]() {
      detail::ConstMatMap<T> G(on->grad.data(), rows, outw);
      if (auto* gx = detail::grad_sink(xn)) {
        detail::MatMap<T>(gx->data(), rows, in).noalias() +=
            G * detail::ConstMatMap<T>(wn->data.data(), outw, in);
      }
      if (auto* gw = detail::grad_sink(wn)) {
        detail::MatMap<T>(gw->data(), outw, in).noalias() +=
            G.transpose() * detail::ConstMatMap<T>(xn->data.data(), rows, in);
      }
      if (bn) {
        if (auto* gb = detail::grad_sink(bn)) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), outw) += G.colwise().sum();
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dGeometry {
  std::size_t channels, height, width, kernel_h, kernel_w, stride, padding, out_h, out_w;

  static Conv2dGeometry make(std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                             std::size_t stride, std::size_t padding) {
    if (stride == 0) throw ShapeError("conv2d stride must be positive");
    if (h + 2 * padding < kh || w + 2 * padding < kw) throw ShapeError("conv2d kernel larger than input");
    return {c, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
            (w + 2 * padding - kw) / stride + 1};
  }
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

namespace detail {

// image (C, H, W) -> columns (C*kh*kw, out_h*out_w)
template <typename T>
void im2col(const T* image, const Conv2dGeometry& g, T* cols) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.positions();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - pad;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const Conv2dGeometry& g, T* image) {
  const long pad = static_cast<long>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = cols + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.positions();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - pad;
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x (N, C, H, W), weight (O, C, kh, kw), optional bias (O).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const std::size_t batch = x.dim(0), out_c = weight.dim(0);
  const auto g = Conv2dGeometry::make(x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), stride, padding);
  const bool pointwise = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
  Shape shape{batch, out_c, g.out_h, g.out_w};
  auto out = bias ? detail::make_output<T>(shape, x, weight, *bias) : detail::make_output<T>(shape, x, weight);
  if (bias && bias->size() != out_c) throw ShapeError("conv2d bias size mismatch");

  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = out_c * g.positions();
  std::vector<T> cols(pointwise ? 0 : g.patch() * g.positions());
  detail::ConstMatMap<T> W(weight.data().data(), out_c, g.patch());
  for (std::size_t n = 0; n < batch; ++n) {
    const T* col_ptr = x.data().data() + n * in_stride;
    if (!pointwise) {
      detail::im2col(col_ptr, g, cols.data());
      col_ptr = cols.data();
    }
    detail::MatMap<T> Y(out.data().data() + n * out_stride, out_c, g.positions());
    Y.noalias() = W * detail::ConstMatMap<T>(col_ptr, g.patch(), g.positions());
    if (bias) {
      Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias->data().data(), out_c);
    }
  }
  if (detail::recording(out)) {
    auto bn = bias ? bias->node() : nullptr;
    detail::record(out, [xn = x.node(), wn = weight.node(), bn, on = out.node(), g, batch, out_c, in_stride,
                         out_stride, pointwise]() {
      auto* gx = detail::grad_sink(xn);
      auto* gw = detail::grad_sink(wn);
      auto* gb = bn ? detail::grad_sink(bn) : nullptr;
      std::vector<T> cols(pointwise ? 0 : g.patch() * g.positions());
      std::vector<T> dcols(g.patch() * g.positions());
      detail::ConstMatMap<T> W(wn->data.data(), out_c, g.patch());
      for (std::size_t n = 0; n < batch; ++n) {
        detail::ConstMatMap<T> G(on->grad.data() + n * out_stride, out_c, g.positions());
        if (gb) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->data(), out_c) += G.rowwise().sum();
        if (gw) {
          const T* col_ptr = xn->data.data() + n * in_stride;
          if (!pointwise) {
            detail::im2col(col_ptr, g, cols.data());
            col_ptr = cols.data();
          }
          detail::MatMap<T>(gw->data(), out_c, g.patch()).noalias() +=
              G * detail::ConstMatMap<T>(col_ptr, g.patch(), g.positions()).transpose();
        }
        if (gx) {
          if (pointwise) {
            detail::MatMap<T>(gx->data() + n * in_stride, g.patch(), g.positions()).noalias() += W.transpose() * G;
          } else {
            detail::MatMap<T>(dcols.data(), g.patch(), g.positions()).noalias() = W.transpose() * G;
            detail::col2im(dcols.data(), g, gx->data() + n * in_stride);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit RunningStats(std::size_t channels = 0)
      : mean(Shape{channels}, T(0)), var(Shape{channels}, T(1)) {}
};

/// Per-channel normalization of x (N, C, ...). Training mode uses batch
/// statistics and updates `stats`; evaluation mode uses `stats`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                     bool training) {
  if (x.rank() < 2) throw ShapeError("batch_norm needs (N, C, ...)");
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  if (gamma.size() != channels || beta.size() != channels || stats.mean.size() != channels) {
    throw ShapeError("batch_norm channel mismatch");
  }
  const std::size_t spatial = x.size() / (batch * channels);
  const std::size_t count = batch * spatial;
  std::vector<T> mu(channels), inv_std(channels);
  auto in = x.data();
  if (training) {
    if (count < 2) throw ShapeError("batch_norm training needs more than one value per channel");
    for (std::size_t c = 0; c < channels; ++c) {
      T s = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = in.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = in.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const T biased = v / static_cast<T>(count);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(biased + stats.eps);
      const T unbiased = v / static_cast<T>(count - 1);
      stats.mean[c] = (T(1) - stats.momentum) * stats.mean[c] + stats.momentum * m;
      stats.var[c] = (T(1) - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = stats.mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.var[c] + stats.eps);
    }
  }
  auto out = detail::make_output<T>(x.shape(), x, gamma, beta);
  auto o = out.data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * spatial;
      const T a = gamma[c] * inv_std[c];
      const T b = beta[c] - mu[c] * a;
      for (std::size_t i = 0; i < spatial; ++i) o[base + i] = in[base + i] * a + b;
    }
  }
  if (detail::recording(out)) {
    detail::record(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), mu, inv_std, batch,
                         channels, spatial, count, training]() {
      auto* gx = detail::grad_sink(xn);
      auto* gg = detail::grad_sink(gn);
      auto* gbeta = detail::grad_sink(bn);
      const auto& go = on->grad;
      const auto& xd = xn->data;
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = (n * channels + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            const T xhat = (xd[base + i] - mu[c]) * inv_std[c];
            sum_g += go[base + i];
            sum_gx += go[base + i] * xhat;
          }
        }
        if (gg) (*gg)[c] += sum_gx;
        if (gbeta) (*gbeta)[c] += sum_g;
        if (!gx) continue;
        const T gam = gn->data[c];
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = (n * channels + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            if (training) {
              const T xhat = (xd[base + i] - mu[c]) * inv_std[c];
              (*gx)[base + i] += gam * inv_std[c] *
                                 (go[base + i] - sum_g / static_cast<T>(count) - xhat * sum_gx / static_cast<T>(count));
            } else {
              (*gx)[base + i] += gam * inv_std[c] * go[base + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity and losses

/// Cosine similarity along the last axis; denominator floored at eps.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  if (u.shape() != v.shape() || u.rank() == 0 || u.shape().back() == 0) {
    throw ShapeError("cosine_similarity shape mismatch: " + to_string(u.shape()) + " vs " + to_string(v.shape()));
  }
  const std::size_t len = u.shape().back();
  const std::size_t rows = u.size() / len;
  Shape shape(u.shape().begin(), u.shape().end() - 1);
  auto out = detail::make_output<T>(shape, u, v);
  std::vector<T> dots(rows), nu(rows), nv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T d = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const T x = u[r * len + i], y = v[r * len + i];
      d += x * y;
      a += x * x;
      b += y * y;
    }
    dots[r] = d;
    nu[r] = std::sqrt(a);
    nv[r] = std::sqrt(b);
    out[r] = std::clamp(d / std::max(nu[r] * nv[r], kEps<T>), T(-1), T(1));
  }
  if (detail::recording(out)) {
    detail::record(out, [un = u.node(), vn = v.node(), on = out.node(), dots, nu, nv, rows, len]() {
      auto* gu = detail::grad_sink(un);
      auto* gv = detail::grad_sink(vn);
      for (std::size_t r = 0; r < rows; ++r) {
        const T denom = nu[r] * nv[r];
        const T g = on->grad[r];
        for (std::size_t i = 0; i < len; ++i) {
          const T x = un->data[r * len + i], y = vn->data[r * len + i];
          if (denom <= kEps<T>) {
            if (gu) (*gu)[r * len + i] += g * y / kEps<T>;
            if (gv) (*gv)[r * len + i] += g * x / kEps<T>;
            continue;
          }
          const T cs = dots[r] / denom;
          if (gu) (*gu)[r * len + i] += g * (y / denom - cs * x / (nu[r] * nu[r]));
          if (gv) (*gv)[r * len + i] += g * (x / denom - cs * y / (nv[r] * nv[r]));
        }
      }
    });
  }
  return out;
}

/// Mean two-term binary cross-entropy; predictions clamped to [eps, 1 - eps].
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) throw ShapeError("bce shape mismatch");
  const T lo = kEps<T>, hi = upper_unit_bound<T>();
  const std::size_t n = pred.size();
  auto out = detail::make_output<T>(Shape{}, pred, target);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(pred[i], lo, hi);
    total -= target[i] * std::log(p) + (T(1) - target[i]) * std::log(T(1) - p);
  }
  out[0] = total / static_cast<T>(n);
  if (detail::recording(out)) {
    detail::record(out, [pn = pred.node(), tn = target.node(), on = out.node(), n, lo, hi]() {
      const T g = on->grad[0] / static_cast<T>(n);
      auto* gp = detail::grad_sink(pn);
      auto* gt = detail::grad_sink(tn);
      for (std::size_t i = 0; i < n; ++i) {
        const T p = std::clamp(pn->data[i], lo, hi);
        const T t = tn->data[i];
        if (gp) (*gp)[i] += g * (p - t) / (p * (T(1) - p));
        if (gt) (*gt)[i] += g * (std::log(T(1) - p) - std::log(p));
      }
    });
  }
  return out;
}

/// Cross-entropy between softmax(logits) and the smoothed one-hot target
/// (1 - s) * onehot + s / K, averaged over rows. Rows with a negative target
/// are ignored; with no valid rows the loss is zero.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& targets, T smoothing = T(0)) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) throw ShapeError("cross_entropy shape mismatch");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  std::size_t valid = 0;
  for (auto t : targets) {
    if (t >= 0 && static_cast<std::size_t>(t) >= classes) throw std::out_of_range("class index out of range");
    if (t >= 0) ++valid;
  }
  auto out = detail::make_output<T>(Shape{}, logits);
  std::vector<T> probs(rows * classes);
  T total = 0;
  const T off = smoothing / static_cast<T>(classes);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    const T* z = logits.data().data() + r * classes;
    const T mx = *std::max_element(z, z + classes);
    T s = 0;
    for (std::size_t k = 0; k < classes; ++k) s += std::exp(z[k] - mx);
    const T log_s = std::log(s);
    for (std::size_t k = 0; k < classes; ++k) {
      const T log_p = z[k] - mx - log_s;
      probs[r * classes + k] = std::exp(log_p);
      const T q = off + (static_cast<std::size_t>(targets[r]) == k ? T(1) - smoothing : T(0));
      total -= q * log_p;
    }
  }
  out[0] = valid ? total / static_cast<T>(valid) : T(0);
  if (detail::recording(out) && valid) {
    detail::record(out, [ln = logits.node(), on = out.node(), probs = std::move(probs), targets, rows, classes,
                         smoothing, off, valid]() {
      auto* gl = detail::grad_sink(ln);
      if (!gl) return;
      const T g = on->grad[0] / static_cast<T>(valid);
      for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0) continue;
        for (std::size_t k = 0; k < classes; ++k) {
          const T q = off + (static_cast<std::size_t>(targets[r]) == k ? T(1) - smoothing : T(0));
          (*gl)[r * classes + k] += g * (probs[r * classes + k] - q);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) throw ShapeError("mse shape mismatch");
  return mean_all(square(sub(pred, target)));
}

}  // namespace sbnet
