#include <gtest/gtest.h>

#include <random>

#include "sbnet/sbnet.hpp"

using namespace sbnet;

namespace {

TokenSeq sequence(std::vector<std::int64_t> ids, std::size_t length) {
  TokenSeq s;
  s.ids.assign(length, Vocab::kPad);
  s.mask.assign(length, 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    s.ids[i] = ids[i];
    s.mask[i] = 1;
  }
  return s;
}

Tensor<float> random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor<float> t({n, 3, size, size});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST(EncoderConfig, DeskShapes) {
  const auto e = EncoderConfig::desk();
  EXPECT_EQ(e.seq_len, 16u);
  EXPECT_EQ(e.text_width, 64u);
  EXPECT_EQ(e.channels, 64u);
  EXPECT_EQ(e.image_size, 96u);
  EXPECT_EQ(e.feature_size(), 12u);
  EXPECT_EQ(e.strided_stages(), 3u);
}

TEST(EncoderConfig, ValidateRejectsInconsistentSettings) {
  auto e = EncoderConfig::desk();
  e.text_width = 32;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e = EncoderConfig::desk();
  e.num_heads = 3;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e = EncoderConfig::desk();
  e.downsample_factor = 6;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e = EncoderConfig::desk();
  e.image_stages = 2;
  EXPECT_THROW(e.validate(), std::invalid_argument);
}

TEST(TextEncoder, OutputShapeAndCls) {
  EncoderConfig e;
  e.d_model = 32;
  Initializer init(1);
  TextEncoder<float> enc(e, init);
  auto out = enc({sequence({Vocab::kCls, 5, 6, 7}, 16)});
  EXPECT_EQ(out.tokens.shape(), (Shape{1, 16, 64}));
  ASSERT_EQ(out.cls.shape(), (Shape{1, 64}));
  for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(out.cls[k], out.tokens[k]);
}

TEST(TextEncoder, PaddingDoesNotLeakIntoRealTokens) {
  EncoderConfig e;
  Initializer init(2);
  TextEncoder<double> enc(e, init);
  auto a = sequence({Vocab::kCls, 5, 6}, 16);
  auto b = a;
  b.ids[10] = 40;  // content hidden behind a zero mask
  auto fa = enc({a}).tokens;
  auto fb = enc({b}).tokens;
  for (std::size_t i = 0; i < 3 * 64; ++i) EXPECT_NEAR(fa[i], fb[i], 1e-12);
}

TEST(TextEncoder, RejectsWrongLength) {
  EncoderConfig e;
  Initializer init(3);
  TextEncoder<float> enc(e, init);
  EXPECT_THROW(enc({sequence({Vocab::kCls}, 8)}), ShapeError);
}

TEST(ImageEncoder, DeskFeatureMap) {
  EncoderConfig e;
  Initializer init(4);
  ImageEncoder<float> enc(e, init);
  auto out = enc(random_images(2, 96, 5), false);
  EXPECT_EQ(out.map.shape(), (Shape{2, 64, 12, 12}));
  EXPECT_EQ(out.downsample_factor, 8u);
  EXPECT_THROW(enc(random_images(1, 64, 6), false), ShapeError);
}

TEST(ImageEncoder, OddSizeRoundsUp) {
  EncoderConfig e;
  e.image_size = 100;
  Initializer init(7);
  ImageEncoder<float> enc(e, init);
  EXPECT_EQ(e.feature_size(), 13u);
  EXPECT_EQ(enc(random_images(1, 100, 8), false).map.shape(), (Shape{1, 64, 13, 13}));
}

TEST(ImageEncoder, EvaluationModeIsPerSample) {
  EncoderConfig e;
  Initializer init(9);
  ImageEncoder<float> enc(e, init);
  auto both = random_images(2, 96, 10);
  Tensor<float> first({1, 3, 96, 96}, std::vector<float>(both.data().begin(), both.data().begin() + 3 * 96 * 96));
  auto batched = enc(both, false).map;
  auto single = enc(first, false).map;
  for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(batched[i], single[i], 1e-5);
}

TEST(SBNet, SameSeedSameParameters) {
  ModelConfig config;
  SBNet<float> a(config, 11), b(config, 11), c(config, 12);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    EXPECT_EQ(pa[k].name, pb[k].name);
    for (std::size_t i = 0; i < pa[k].tensor.size(); ++i) {
      ASSERT_EQ(pa[k].tensor[i], pb[k].tensor[i]);
      differs = differs || pa[k].tensor[i] != pc[k].tensor[i];
    }
  }
  EXPECT_TRUE(differs);
}
