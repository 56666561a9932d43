#pragma once

// Cross-modal fusion: co-attention between tokens and spatial positions,
// residual enhancement of both features, language-driven channel gating and
// the mask head.

#include <cmath>
#include <string>
#include <utility>

#include "sbnet/nn.hpp"

namespace sbnet {

template <typename T>
struct FusedFeatures {
  Tensor<T> text;       // FN_e (N, l, e)
  Tensor<T> image;      // FI_e (N, c, h, w)
  Tensor<T> modulated;  // FM (N, c, h, w)
  Tensor<T> gate;       // (N, c, 1, 1)
};

/// A = softmax over positions of proj_text(FN) x proj_image(FI)^T / sqrt(c).
template <typename T>
class CoAttention {
 public:
  CoAttention() = default;
  CoAttention(std::size_t text_width, std::size_t channels, Initializer& init) : channels_(channels) {
    if (text_width != channels) {
      throw std::invalid_argument("co-attention needs text width == image channels (" + std::to_string(text_width) +
                                  " vs " + std::to_string(channels) + ")");
    }
    text_proj_ = Linear<T>(text_width, text_width, init);
    image_proj_ = Conv2d<T>(channels, text_width, 1, 1, 0, init);
  }

  /// FN (N, l, e), FI (N, c, h, w) -> A (N, l, h*w).
  Tensor<T> operator()(const Tensor<T>& text, const Tensor<T>& image) const {
    const std::size_t n = image.dim(0), cells = image.dim(2) * image.dim(3);
    auto projected_text = text_proj_(text);
    auto projected_image = reshape(image_proj_(image), {n, text_proj_.weight.dim(0), cells});
    auto logits = scale(matmul(projected_text, projected_image), T(1) / std::sqrt(static_cast<T>(channels_)));
    return softmax(logits, -1);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    text_proj_.collect(out, prefix + "text.");
    image_proj_.collect(out, prefix + "image.");
  }

  Linear<T>& text_projection() { return text_proj_; }
  Conv2d<T>& image_projection() { return image_proj_; }

 private:
  std::size_t channels_ = 1;
  Linear<T> text_proj_;
  Conv2d<T> image_proj_;
};

/// FN_e = FN + A * flat(FI)^T and FI_e = FI + unflatten(A^T * FN).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> enhance(const Tensor<T>& text, const Tensor<T>& image, const Tensor<T>& attention) {
  const std::size_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (text.dim(2) != c) throw ShapeError("enhance: text width must equal image channels");
  auto flat = reshape(image, {n, c, h * w});
  auto text_enhanced = add(text, matmul(attention, transpose(flat)));
  auto image_update = reshape(transpose(matmul(transpose(attention), text)), {n, c, h, w});
  return {text_enhanced, add(image, image_update)};
}

/// gate = sigmoid(MLP(token mean of FN_e)) shaped (N, c, 1, 1); FM = FI_e * gate.
template <typename T>
class ChannelGate {
 public:
  ChannelGate() = default;
  ChannelGate(std::size_t text_width, std::size_t hidden, std::size_t channels, Initializer& init)
      : hidden_(text_width, hidden, init), out_(hidden, channels, init) {}

  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& text_enhanced, const Tensor<T>& image_enhanced) const {
    const std::size_t n = image_enhanced.dim(0), c = image_enhanced.dim(1);
    auto gate = reshape(sigmoid(out_(relu(hidden_(mean(text_enhanced, 1))))), {n, c, 1, 1});
    return {mul(image_enhanced, gate), gate};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    hidden_.collect(out, prefix + "fc1.");
    out_.collect(out, prefix + "fc2.");
  }

  Linear<T>& output_layer() { return out_; }

 private:
  Linear<T> hidden_, out_;
};

/// Three conv-BN-ReLU layers (c -> a -> a/2 -> a/4), a conv to one channel
/// and a sigmoid clamped to [eps, 1 - eps].
template <typename T>
class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(std::size_t channels, std::size_t width, Initializer& init) {
    const std::size_t widths[3] = {width, std::max<std::size_t>(width / 2, 1), std::max<std::size_t>(width / 4, 1)};
    std::size_t in = channels;
    for (std::size_t w : widths) {
      convs_.emplace_back(in, w, 3, 1, 1, init);
      norms_.emplace_back(w, init);
      in = w;
    }
    final_ = Conv2d<T>(in, 1, 3, 1, 1, init);
  }

  Tensor<T> operator()(const Tensor<T>& modulated, bool training) const {
    Tensor<T> x = modulated;
    for (std::size_t i = 0; i < convs_.size(); ++i) x = relu(norms_[i](convs_[i](x), training));
    return clamp_straight_through(sigmoid(final_(x)), kEps<T>, upper_unit_bound<T>());
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(out, prefix + "conv" + std::to_string(i) + ".");
      norms_[i].collect(out, prefix + "bn" + std::to_string(i) + ".");
    }
    final_.collect(out, prefix + "out.");
  }

 private:
  std::vector<Conv2d<T>> convs_;
  std::vector<BatchNorm<T>> norms_;
  Conv2d<T> final_;
};

}  // namespace sbnet
