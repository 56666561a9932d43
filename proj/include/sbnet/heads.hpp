#pragma once

// Auxiliary heads: color/type classifiers for both modalities, the
// substitution module that regenerates each modality's pooled feature from
// the other, and the next-frame predictor.

#include <string>
#include <utility>

#include "sbnet/encoders.hpp"

namespace sbnet {

template <typename T>
struct ClassLogits {
  Tensor<T> text_color;   // C_n (N, colors)
  Tensor<T> text_type;    // T_n (N, types)
  Tensor<T> image_color;  // C_i (N, colors)
  Tensor<T> image_type;   // T_i (N, types)
};

template <typename T>
struct SubstitutionBundle {
  Tensor<T> image_target;     // FI_gt (N, c)
  Tensor<T> text_target;      // FN_gt (N, e)
  Tensor<T> image_generated;  // FI_g (N, c)
  Tensor<T> text_generated;   // FN_g (N, e)
};

/// Spatial average of `features` (N, c, h, w) weighted by the binary `box`
/// (N, 1, h, w). Every sample needs at least one active cell.
template <typename T>
Tensor<T> box_pool(const Tensor<T>& features, const Tensor<T>& box) {
  if (box.rank() != 4 || box.dim(0) != features.dim(0) || box.dim(1) != 1 || box.dim(2) != features.dim(2) ||
      box.dim(3) != features.dim(3)) {
    throw ShapeError("box mask " + to_string(box.shape()) + " does not match features " + to_string(features.shape()));
  }
  const std::size_t n = features.dim(0), cells = features.dim(2) * features.dim(3);
  Tensor<T> area({n, 1});
  for (std::size_t b = 0; b < n; ++b) {
    T s = 0;
    for (std::size_t i = 0; i < cells; ++i) s += box[b * cells + i];
    if (s <= T(0)) throw std::invalid_argument("empty box mask");
    area[b] = s;
  }
  auto masked = reshape(mul(features, box), {n, features.dim(1), cells});
  return div(sum(masked, 2), area);
}

/// Mean over every spatial position: (N, c, h, w) -> (N, c).
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& features) {
  const std::size_t n = features.dim(0), c = features.dim(1);
  return mean(reshape(features, {n, c, features.dim(2) * features.dim(3)}), 2);
}

/// One linear layer on FN_cls whose output splits into color and type logits.
template <typename T>
class TextClassifier {
 public:
  TextClassifier() = default;
  TextClassifier(std::size_t width, std::size_t colors, std::size_t types, Initializer& init)
      : colors_(colors), types_(types), layer_(width, colors + types, init) {}

  std::pair<Tensor<T>, Tensor<T>> operator()(const Tensor<T>& cls) const {
    auto logits = layer_(cls);
    return {slice(logits, -1, 0, colors_), slice(logits, -1, colors_, types_)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const { layer_.collect(out, prefix); }

 private:
  std::size_t colors_ = 0, types_ = 0;
  Linear<T> layer_;
};

template <typename T>
struct ImageClassification {
  Tensor<T> color;   // C_i
  Tensor<T> type;    // T_i
  Tensor<T> pooled;  // FI_cls (N, c)
};

/// Box-pooled image feature followed by Linear-ReLU-Linear.
template <typename T>
class ImageClassifier {
 public:
  ImageClassifier() = default;
  ImageClassifier(std::size_t channels, std::size_t hidden, std::size_t colors, std::size_t types, Initializer& init)
      : colors_(colors), types_(types), hidden_(channels, hidden, init), out_(hidden, colors + types, init) {}

  ImageClassification<T> operator()(const Tensor<T>& features, const Tensor<T>& box) const {
    auto pooled = box_pool(features, box);
    auto logits = out_(relu(hidden_(pooled)));
    return {slice(logits, -1, 0, colors_), slice(logits, -1, colors_, types_), pooled};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    hidden_.collect(out, prefix + "fc1.");
    out_.collect(out, prefix + "fc2.");
  }

 private:
  std::size_t colors_ = 0, types_ = 0;
  Linear<T> hidden_, out_;
};

/// Generates FI_g from the token-mean of FN (Linear-LeakyReLU-Linear) and
/// FN_g from FI concatenated with the box mask (conv-ReLU-conv, global mean).
template <typename T>
class Substitution {
 public:
  Substitution() = default;
  Substitution(std::size_t text_width, std::size_t channels, Initializer& init)
      : mlp_in_(text_width, text_width, init),
        mlp_out_(text_width, channels, init),
        conv_in_(channels + 1, channels, 3, 1, 1, init),
        conv_out_(channels, text_width, 3, 1, 1, init) {}

  Tensor<T> generate_image(const Tensor<T>& text_tokens) const {
    return mlp_out_(leaky_relu(mlp_in_(mean(text_tokens, 1)), T(0.01)));
  }

  Tensor<T> generate_text(const Tensor<T>& features, const Tensor<T>& box) const {
    auto x = concat<T>({features, box}, 1);
    return spatial_mean(conv_out_(relu(conv_in_(x))));
  }

  SubstitutionBundle<T> operator()(const Tensor<T>& text_tokens, const Tensor<T>& features, const Tensor<T>& box) const {
    return {spatial_mean(features), mean(text_tokens, 1), generate_image(text_tokens), generate_text(features, box)};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    mlp_in_.collect(out, prefix + "mlp1.");
    mlp_out_.collect(out, prefix + "mlp2.");
    conv_in_.collect(out, prefix + "conv1.");
    conv_out_.collect(out, prefix + "conv2.");
  }

 private:
  Linear<T> mlp_in_, mlp_out_;
  Conv2d<T> conv_in_, conv_out_;
};

/// 3x3 conv stack c -> c/4 -> c/16 -> 3 with ReLU between; linear output.
template <typename T>
class FutureHead {
 public:
  FutureHead() = default;
  FutureHead(std::size_t channels, Initializer& init)
      : conv1_(channels, std::max<std::size_t>(channels / 4, 1), 3, 1, 1, init),
        conv2_(std::max<std::size_t>(channels / 4, 1), std::max<std::size_t>(channels / 16, 1), 3, 1, 1, init),
        conv3_(std::max<std::size_t>(channels / 16, 1), 3, 3, 1, 1, init) {}

  Tensor<T> operator()(const Tensor<T>& features) const { return conv3_(relu(conv2_(relu(conv1_(features))))); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    conv1_.collect(out, prefix + "conv1.");
    conv2_.collect(out, prefix + "conv2.");
    conv3_.collect(out, prefix + "conv3.");
  }

  Conv2d<T>& layer(std::size_t i) { return i == 0 ? conv1_ : i == 1 ? conv2_ : conv3_; }

 private:
  Conv2d<T> conv1_, conv2_, conv3_;
};

}  // namespace sbnet
