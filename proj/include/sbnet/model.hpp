#pragma once

// The full network: both encoders, auxiliary heads and fusion, with a
// training forward pass and a cached inference path for ranking.

#include <cstdint>
#include <string>
#include <vector>

#include "sbnet/checkpoint.hpp"
#include "sbnet/encoders.hpp"
#include "sbnet/fusion.hpp"
#include "sbnet/heads.hpp"
#include "sbnet/scoring.hpp"

namespace sbnet {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t num_colors = 12;
  std::size_t num_types = 10;
  std::size_t mask_width = 32;  // first rung of the mask head ladder
  std::size_t classifier_hidden = 64;
  std::size_t gate_hidden = 64;

  static ModelConfig desk() { return {}; }

  static ModelConfig full() {
    ModelConfig m;
    m.encoder = EncoderConfig::full();
    m.mask_width = 1024;
    m.classifier_hidden = 1024;
    m.gate_hidden = 1024;
    return m;
  }
};

template <typename T>
struct ForwardResult {
  TextFeatures<T> text;
  ImageFeatures<T> image;
  Tensor<T> attention;  // A (N, l, h*w)
  FusedFeatures<T> fused;
  Tensor<T> mask;  // M (N, 1, h, w)
  ClassLogits<T> logits;
  Tensor<T> pooled;  // FI_cls
  SubstitutionBundle<T> bundle;
  Tensor<T> future;  // U (N, 3, h, w)
};

/// Per-description quantities reused across candidate frames.
template <typename T>
struct TextCache {
  Tensor<T> tokens;           // FN (1, l, e)
  Tensor<T> target;           // FN_gt (1, e)
  Tensor<T> image_generated;  // FI_g (1, c)
  int color = 0;              // attribute ids used inside CTM
  int type = 0;
};

/// Per-(frame, box) quantities reused across descriptions.
template <typename T>
struct FrameCache {
  Tensor<T> features;        // FI (1, c, h, w)
  Tensor<T> box;             // b (1, 1, h, w)
  Tensor<T> target;          // FI_gt (1, c)
  Tensor<T> text_generated;  // FN_g (1, e)
  Tensor<T> image_color;     // C_i (1, colors)
  Tensor<T> image_type;      // T_i (1, types)
};

template <typename T>
class SBNet {
 public:
  SBNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.encoder.validate();
    Initializer init(seed);
    const auto& e = config.encoder;
    text_encoder_ = TextEncoder<T>(e, init);
    image_encoder_ = ImageEncoder<T>(e, init);
    text_classifier_ = TextClassifier<T>(e.text_width, config.num_colors, config.num_types, init);
    image_classifier_ = ImageClassifier<T>(e.channels, config.classifier_hidden, config.num_colors, config.num_types, init);
    substitution_ = Substitution<T>(e.text_width, e.channels, init);
    future_ = FutureHead<T>(e.channels, init);
    attention_ = CoAttention<T>(e.text_width, e.channels, init);
    gate_ = ChannelGate<T>(e.text_width, config.gate_hidden, e.channels, init);
    mask_head_ = MaskHead<T>(e.channels, config.mask_width, init);
  }

  const ModelConfig& config() const { return config_; }

  TextFeatures<T> encode_text(const std::vector<TokenSeq>& tokens) const { return text_encoder_(tokens); }
  ImageFeatures<T> encode_image(const Tensor<T>& images, bool training) const {
    return image_encoder_(images, training);
  }

  /// Co-attention, enhancement, gating and mask prediction.
  Tensor<T> predict_mask(const Tensor<T>& text_tokens, const Tensor<T>& image, bool training,
                         FusedFeatures<T>* fused_out = nullptr, Tensor<T>* attention_out = nullptr) const {
    auto attention = attention_(text_tokens, image);
    auto [text_e, image_e] = enhance(text_tokens, image, attention);
    auto [modulated, gate] = gate_(text_e, image_e);
    if (fused_out) *fused_out = {text_e, image_e, modulated, gate};
    if (attention_out) *attention_out = attention;
    return mask_head_(modulated, training);
  }

  ForwardResult<T> forward(const std::vector<TokenSeq>& tokens, const Tensor<T>& images, const Tensor<T>& boxes,
                           bool training) const {
    ForwardResult<T> r;
    r.text = encode_text(tokens);
    r.image = encode_image(images, training);
    r.mask = predict_mask(r.text.tokens, r.image.map, training, &r.fused, &r.attention);
    auto [color_n, type_n] = text_classifier_(r.text.cls);
    auto img = image_classifier_(r.image.map, boxes);
    r.logits = {color_n, type_n, img.color, img.type};
    r.pooled = img.pooled;
    r.bundle = substitution_(r.text.tokens, r.image.map, boxes);
    r.future = future_(r.image.map);
    return r;
  }

  /// Evaluation-mode text side for one description. When the lexicon gave
  /// no attribute, the text head's argmax stands in.
  TextCache<T> cache_text(const TokenSeq& tokens, int color = -1, int type = -1) const {
    NoTapeScope<T> off;
    auto text = encode_text({tokens});
    TextCache<T> c;
    c.tokens = text.tokens;
    c.target = mean(text.tokens, 1);
    c.image_generated = substitution_.generate_image(text.tokens);
    auto [color_n, type_n] = text_classifier_(text.cls);
    c.color = color >= 0 ? color : argmax(color_n);
    c.type = type >= 0 ? type : argmax(type_n);
    return c;
  }

  /// Evaluation-mode frame side for a batch of frames with candidate boxes.
  std::vector<FrameCache<T>> cache_frames(const Tensor<T>& images, const Tensor<T>& boxes) const {
    NoTapeScope<T> off;
    auto fi = encode_image(images, false).map;
    auto img = image_classifier_(fi, boxes);
    auto target = spatial_mean(fi);
    auto generated = substitution_.generate_text(fi, boxes);
    std::vector<FrameCache<T>> out;
    for (std::size_t i = 0; i < images.dim(0); ++i) {
      out.push_back({slice(fi, 0, i, 1), slice(boxes, 0, i, 1), slice(target, 0, i, 1), slice(generated, 0, i, 1),
                     slice(img.color, 0, i, 1), slice(img.type, 0, i, 1)});
    }
    return out;
  }

  /// Match scores of one description against several cached frames.
  std::vector<MatchScore> score(const TextCache<T>& text, const std::vector<const FrameCache<T>*>& frames,
                                double lambda_ctm) const {
    NoTapeScope<T> off;
    const std::size_t n = frames.size();
    std::vector<Tensor<T>> fi, boxes, image_targets, text_generated, colors, types;
    for (const auto* f : frames) {
      fi.push_back(f->features);
      boxes.push_back(f->box);
      image_targets.push_back(f->target);
      text_generated.push_back(f->text_generated);
      colors.push_back(f->image_color);
      types.push_back(f->image_type);
    }
    auto features = concat(fi, 0);
    auto box = concat(boxes, 0);
    auto tokens = repeat_batch(text.tokens, n);
    auto mask = predict_mask(tokens, features, false);
    SubstitutionBundle<T> bundle{concat(image_targets, 0), repeat_batch(text.target, n),
                                 repeat_batch(text.image_generated, n), concat(text_generated, 0)};
    return match_probability(mask, box, bundle, concat(colors, 0), concat(types, 0), std::vector<int>(n, text.color),
                             std::vector<int>(n, text.type), lambda_ctm);
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    text_encoder_.collect(out, "text.");
    image_encoder_.collect(out, "image.");
    text_classifier_.collect(out, "cls_text.");
    image_classifier_.collect(out, "cls_img.");
    substitution_.collect(out, "subst.");
    future_.collect(out, "future.");
    attention_.collect(out, "fuse.attn.");
    gate_.collect(out, "fuse.gate.");
    mask_head_.collect(out, "fuse.mask.");
    return out;
  }

  void save(const std::string& path) const { save_checkpoint(path, parameters()); }
  void load(const std::string& path) {
    auto params = parameters();
    load_checkpoint(path, params);
  }

  // Component access for tests and gradient checks.
  const TextEncoder<T>& text_encoder() const { return text_encoder_; }
  const ImageEncoder<T>& image_encoder() const { return image_encoder_; }
  const TextClassifier<T>& text_classifier() const { return text_classifier_; }
  const ImageClassifier<T>& image_classifier() const { return image_classifier_; }
  const Substitution<T>& substitution() const { return substitution_; }
  const FutureHead<T>& future_head() const { return future_; }
  const CoAttention<T>& attention() const { return attention_; }
  const ChannelGate<T>& gate() const { return gate_; }
  const MaskHead<T>& mask_head() const { return mask_head_; }

  static int argmax(const Tensor<T>& row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
      if (row[i] > row[best]) best = i;
    }
    return static_cast<int>(best);
  }

  static Tensor<T> repeat_batch(const Tensor<T>& x, std::size_t n) {
    Shape shape = x.shape();
    const std::size_t per = x.size();
    shape[0] = n;
    Tensor<T> out(shape);
    for (std::size_t i = 0; i < n; ++i) std::copy(x.data().begin(), x.data().end(), out.data().begin() + i * per);
    return out;
  }

 private:
  ModelConfig config_;
  TextEncoder<T> text_encoder_;
  ImageEncoder<T> image_encoder_;
  TextClassifier<T> text_classifier_;
  ImageClassifier<T> image_classifier_;
  Substitution<T> substitution_;
  FutureHead<T> future_;
  CoAttention<T> attention_;
  ChannelGate<T> gate_;
  MaskHead<T> mask_head_;
};

}  // namespace sbnet
