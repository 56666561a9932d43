#pragma once

// Language encoder (token + position embeddings, masked transformer blocks,
// projection to width e) and image encoder (strided conv stages followed by
// stride-1 residual stages).

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/nn.hpp"
#include "sbnet/text.hpp"

namespace sbnet {

struct EncoderConfig {
  std::size_t seq_len = 16;           // l
  std::size_t text_width = 64;        // e
  std::size_t channels = 64;          // c
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t num_layers = 2;
  std::size_t ffn_width = 128;
  std::size_t image_size = 96;
  std::size_t downsample_factor = 8;
  std::size_t image_stages = 6;
  std::size_t vocab_size = 256;

  static EncoderConfig desk() { return {}; }

  static EncoderConfig full() {
    EncoderConfig c;
    c.seq_len = 30;
    c.text_width = 2048;
    c.channels = 2048;
    c.d_model = 256;
    c.num_heads = 4;
    c.num_layers = 12;
    c.ffn_width = 1024;
    c.image_size = 384;
    c.downsample_factor = 8;
    c.image_stages = 6;
    c.vocab_size = 30522;
    return c;
  }

  std::size_t strided_stages() const {
    std::size_t s = 0;
    for (std::size_t f = downsample_factor; f > 1; f /= 2) ++s;
    return s;
  }

  std::size_t feature_size() const { return (image_size + downsample_factor - 1) / downsample_factor; }

  void validate() const {
    if (text_width != channels) {
      throw std::invalid_argument("encoder config: text width e (" + std::to_string(text_width) +
                                  ") must equal image channels c (" + std::to_string(channels) + ")");
    }
    if (num_heads == 0 || d_model % num_heads != 0) {
      throw std::invalid_argument("encoder config: d_model must be divisible by num_heads");
    }
    if (downsample_factor == 0 || (downsample_factor & (downsample_factor - 1)) != 0) {
      throw std::invalid_argument("encoder config: downsample_factor must be a power of two");
    }
    if (image_stages < strided_stages()) {
      throw std::invalid_argument("encoder config: not enough stages for the downsample factor");
    }
    if (seq_len < 2) throw std::invalid_argument("encoder config: seq_len must be at least 2");
    const std::size_t strided = strided_stages();
    if (strided > 0 && channels % (std::size_t{1} << (strided - 1)) != 0) {
      throw std::invalid_argument("encoder config: channels too small for the stage ladder");
    }
  }
};

template <typename T>
struct TextFeatures {
  Tensor<T> tokens;  // FN (N, l, e)
  Tensor<T> cls;     // FN_cls (N, e)
};

template <typename T>
struct ImageFeatures {
  Tensor<T> map;  // FI (N, c, h*, w*)
  std::size_t downsample_factor = 1;
};

template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t ffn, Initializer& init)
      : heads_(heads),
        query_(d_model, d_model, init),
        key_(d_model, d_model, init),
        value_(d_model, d_model, init),
        out_(d_model, d_model, init),
        norm1_(d_model, init),
        ffn_in_(d_model, ffn, init),
        ffn_out_(ffn, d_model, init),
        norm2_(d_model, init) {}

  /// x (N, l, d); key_bias (N, 1, 1, l) holds 0 for real tokens and a large
  /// negative value for padding.
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& key_bias) const {
    const std::size_t n = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads_;
    auto split = [&](const Tensor<T>& t) { return permute(reshape(t, {n, l, heads_, dh}), {0, 2, 1, 3}); };
    auto q = split(query_(x));
    auto k = split(key_(x));
    auto v = split(value_(x));
    auto scores = add(scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(dh))), key_bias);
    auto context = matmul(softmax(scores, -1), v);
    auto merged = reshape(permute(context, {0, 2, 1, 3}), {n, l, d});
    auto h = norm1_(add(x, out_(merged)));
    return norm2_(add(h, ffn_out_(relu(ffn_in_(h)))));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    query_.collect(out, prefix + "q.");
    key_.collect(out, prefix + "k.");
    value_.collect(out, prefix + "v.");
    out_.collect(out, prefix + "o.");
    norm1_.collect(out, prefix + "norm1.");
    ffn_in_.collect(out, prefix + "ffn1.");
    ffn_out_.collect(out, prefix + "ffn2.");
    norm2_.collect(out, prefix + "norm2.");
  }

 private:
  std::size_t heads_ = 1;
  Linear<T> query_, key_, value_, out_;
  LayerNorm<T> norm1_;
  Linear<T> ffn_in_, ffn_out_;
  LayerNorm<T> norm2_;
};

template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const EncoderConfig& config, Initializer& init) : config_(config) {
    config.validate();
    token_table_ = init.uniform<T>({config.vocab_size, config.d_model}, 1.0);
    position_table_ = init.uniform<T>({config.seq_len, config.d_model}, 1.0);
    for (std::size_t i = 0; i < config.num_layers; ++i) {
      blocks_.emplace_back(config.d_model, config.num_heads, config.ffn_width, init);
    }
    projection_ = Linear<T>(config.d_model, config.text_width, init);
  }

  TextFeatures<T> operator()(const std::vector<TokenSeq>& batch) const {
    const std::size_t n = batch.size(), l = config_.seq_len;
    std::vector<std::int64_t> ids;
    Tensor<T> key_bias({n, 1, 1, l});
    for (std::size_t b = 0; b < n; ++b) {
      if (batch[b].ids.size() != l) {
        throw ShapeError("token sequence length " + std::to_string(batch[b].ids.size()) + " != configured " +
                         std::to_string(l));
      }
      ids.insert(ids.end(), batch[b].ids.begin(), batch[b].ids.end());
      for (std::size_t i = 0; i < l; ++i) key_bias[b * l + i] = batch[b].mask[i] ? T(0) : T(-1e9);
    }
    auto x = add(embedding(token_table_, ids, {n, l}), position_table_);
    for (const auto& block : blocks_) x = block(x, key_bias);
    TextFeatures<T> out;
    out.tokens = projection_(x);
    out.cls = reshape(slice(out.tokens, 1, 0, 1), {n, config_.text_width});
    return out;
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + "token_embedding", token_table_});
    out.push_back({prefix + "position_embedding", position_table_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + "block" + std::to_string(i) + ".");
    projection_.collect(out, prefix + "proj.");
  }

  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  Tensor<T> token_table_;
  Tensor<T> position_table_;
  std::vector<TransformerBlock<T>> blocks_;
  Linear<T> projection_;
};

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const EncoderConfig& config, Initializer& init) : config_(config) {
    config.validate();
    const std::size_t strided = config.strided_stages();
    std::size_t in = 3;
    for (std::size_t s = 0; s < config.image_stages; ++s) {
      const bool down = s < strided;
      const std::size_t out = down ? config.channels >> (strided - 1 - s) : config.channels;
      convs_.emplace_back(in, out, 3, down ? 2 : 1, 1, init);
      norms_.emplace_back(out, init);
      in = out;
    }
  }

  /// images (N, 3, H, W) with H == W == image_size.
  ImageFeatures<T> operator()(const Tensor<T>& images, bool training) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.image_size ||
        images.dim(3) != config_.image_size) {
      throw ShapeError("image encoder expects (N, 3, " + std::to_string(config_.image_size) + ", " +
                       std::to_string(config_.image_size) + "), got " + to_string(images.shape()));
    }
    const std::size_t strided = config_.strided_stages();
    Tensor<T> x = images;
    for (std::size_t s = 0; s < convs_.size(); ++s) {
      auto y = norms_[s](convs_[s](x), training);
      x = s < strided ? relu(y) : relu(add(y, x));
    }
    return {x, config_.downsample_factor};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t s = 0; s < convs_.size(); ++s) {
      convs_[s].collect(out, prefix + "stage" + std::to_string(s) + ".conv.");
      norms_[s].collect(out, prefix + "stage" + std::to_string(s) + ".bn.");
    }
  }

  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  std::vector<Conv2d<T>> convs_;
  std::vector<BatchNorm<T>> norms_;
};

}  // namespace sbnet
