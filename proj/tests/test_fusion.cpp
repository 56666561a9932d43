#include <gtest/gtest.h>

#include <random>

#include "sbnet/sbnet.hpp"

using namespace sbnet;

namespace {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace

TEST(CoAttention, RowsAreDistributionsOverPositions) {
  Initializer init(1);
  CoAttention<double> attn(64, 64, init);
  auto a = attn(random_tensor<double>({2, 16, 64}, 2, 3), random_tensor<double>({2, 64, 12, 12}, 3, 3));
  ASSERT_EQ(a.shape(), (Shape{2, 16, 144}));
  for (std::size_t r = 0; r < 2 * 16; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 144; ++j) {
      EXPECT_GE(a[r * 144 + j], 0.0);
      total += a[r * 144 + j];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(CoAttention, WidthMismatchThrows) {
  Initializer init(4);
  EXPECT_THROW(CoAttention<float>(32, 64, init), std::invalid_argument);
}

TEST(Enhance, MatchesDirectSums) {
  auto text = random_tensor<double>({1, 2, 3}, 5);
  auto image = random_tensor<double>({1, 3, 2, 2}, 6);
  auto attention = random_tensor<double>({1, 2, 4}, 7);
  auto [te, ie] = enhance(text, image, attention);
  ASSERT_EQ(te.shape(), (Shape{1, 2, 3}));
  ASSERT_EQ(ie.shape(), (Shape{1, 3, 2, 2}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = text[i * 3 + k];
      for (std::size_t p = 0; p < 4; ++p) s += attention[i * 4 + p] * image[k * 4 + p];
      EXPECT_NEAR(te[i * 3 + k], s, 1e-12);
    }
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t p = 0; p < 4; ++p) {
      double s = image[k * 4 + p];
      for (std::size_t i = 0; i < 2; ++i) s += attention[i * 4 + p] * text[i * 3 + k];
      EXPECT_NEAR(ie[k * 4 + p], s, 1e-12);
    }
}

TEST(ChannelGate, GateInUnitIntervalAndScalesChannels) {
  Initializer init(8);
  ChannelGate<double> gate(64, 32, 64, init);
  auto image = random_tensor<double>({2, 64, 4, 4}, 9);
  auto [fm, g] = gate(random_tensor<double>({2, 16, 64}, 10, 5), image);
  ASSERT_EQ(g.shape(), (Shape{2, 64, 1, 1}));
  ASSERT_EQ(fm.shape(), image.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_GT(g[i], 0.0);
    EXPECT_LT(g[i], 1.0);
  }
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 64; ++c)
      for (std::size_t p = 0; p < 16; ++p) {
        const std::size_t i = (b * 64 + c) * 16 + p;
        EXPECT_NEAR(fm[i], image[i] * g[b * 64 + c], 1e-12);
      }
}

TEST(MaskHead, OutputStrictlyInsideUnitInterval) {
  Initializer init(11);
  MaskHead<float> head(64, 32, init);
  for (double scale : {1.0, 100.0}) {
    for (bool training : {true, false}) {
      auto m = head(random_tensor<float>({2, 64, 12, 12}, 12, scale), training);
      ASSERT_EQ(m.shape(), (Shape{2, 1, 12, 12}));
      for (float v : m.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
      }
    }
  }
}

TEST(SBNet, ForwardShapes) {
  ModelConfig config;
  SBNet<float> model(config, 13);
  TokenSeq seq;
  seq.ids.assign(16, Vocab::kPad);
  seq.mask.assign(16, 0);
  seq.ids[0] = Vocab::kCls;
  seq.mask[0] = 1;
  seq.ids[1] = 7;
  seq.mask[1] = 1;
  Tensor<float> boxes({2, 1, 12, 12});
  for (std::size_t i = 0; i < boxes.size(); ++i) boxes[i] = (i % 144) < 40 ? 1.0f : 0.0f;
  auto r = model.forward({seq, seq}, random_tensor<float>({2, 3, 96, 96}, 14), boxes, true);
  EXPECT_EQ(r.text.tokens.shape(), (Shape{2, 16, 64}));
  EXPECT_EQ(r.image.map.shape(), (Shape{2, 64, 12, 12}));
  EXPECT_EQ(r.attention.shape(), (Shape{2, 16, 144}));
  EXPECT_EQ(r.mask.shape(), (Shape{2, 1, 12, 12}));
  EXPECT_EQ(r.logits.text_color.shape(), (Shape{2, 12}));
  EXPECT_EQ(r.logits.image_type.shape(), (Shape{2, 10}));
  EXPECT_EQ(r.future.shape(), (Shape{2, 3, 12, 12}));
}
