#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "sbnet/sbnet.hpp"

using namespace sbnet;

namespace {

Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Tensor<double> box_tensor(std::size_t n, std::size_t size, std::size_t lo, std::size_t hi) {
  Tensor<double> b({n, 1, size, size});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t y = lo; y < hi; ++y)
      for (std::size_t x = lo; x < hi; ++x) b[(s * size + y) * size + x] = 1;
  return b;
}

Tensor<double> one_hot_logits(std::size_t n, std::size_t k, const std::vector<std::int64_t>& hot, double value) {
  Tensor<double> t({n, k});
  for (std::size_t i = 0; i < n; ++i) t[i * k + static_cast<std::size_t>(hot[i])] = value;
  return t;
}

// A batch where every loss term sits at its minimum.
struct PerfectBatch {
  Tensor<double> mask, box, future, next;
  ClassLogits<double> logits;
  LossTargets targets;
  SubstitutionBundle<double> bundle;
};

PerfectBatch perfect_batch() {
  PerfectBatch p;
  const std::size_t n = 2;
  p.box = box_tensor(n, 6, 1, 4);
  p.mask = Tensor<double>(p.box.shape());
  for (std::size_t i = 0; i < p.mask.size(); ++i) p.mask[i] = p.box[i] > 0 ? upper_unit_bound<double>() : kEps<double>;
  p.targets.colors = {3, 7};
  p.targets.types = {1, 9};
  p.targets.has_next = {true, true};
  p.logits = {one_hot_logits(n, 12, p.targets.colors, 60), one_hot_logits(n, 10, p.targets.types, 60),
              one_hot_logits(n, 12, p.targets.colors, 60), one_hot_logits(n, 10, p.targets.types, 60)};
  auto image = random_tensor({n, 8}, 1);
  auto text = random_tensor({n, 8}, 2);
  p.bundle = {image, text, image.clone(), text.clone()};
  p.next = random_tensor({n, 3, 6, 6}, 3);
  p.future = p.next.clone();
  return p;
}

LossReport<double> losses(const PerfectBatch& p, const LossOptions& options = {}) {
  return compute_losses(p.mask, p.box, p.logits, p.targets, p.bundle, p.future, p.next, options);
}

}  // namespace

TEST(Score, ComponentRanges) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto raw = random_tensor({3, 1, 6, 6}, 10 + trial, 6);
    Tensor<double> mask(raw.shape());
    for (std::size_t i = 0; i < raw.size(); ++i) mask[i] = 1 / (1 + std::exp(-raw[i]));
    for (double m : mask_prediction_ratio(mask, box_tensor(3, 6, 0, 3))) {
      EXPECT_GE(m, 0);
      EXPECT_LE(m, 1);
    }
    SubstitutionBundle<double> b{random_tensor({3, 8}, 40 + trial), random_tensor({3, 8}, 60 + trial),
                                 random_tensor({3, 8}, 80 + trial), random_tensor({3, 8}, 100 + trial)};
    for (double s : substitution_similarity(b)) {
      EXPECT_GE(s, -2);
      EXPECT_LE(s, 2);
    }
    for (double c : color_type_match(random_tensor({3, 12}, 120 + trial, 8), random_tensor({3, 10}, 140 + trial, 8),
                                     {0, 5, 11}, {9, 0, 4})) {
      EXPECT_GT(c, 0);
      EXPECT_LT(c, 2);
    }
  }
}

TEST(Score, UniformLogitsGiveChanceMatch) {
  auto c = color_type_match(Tensor<double>({1, 12}), Tensor<double>({1, 10}), {4}, {2});
  EXPECT_NEAR(c[0], 1.0 / 12 + 1.0 / 10, 1e-12);
}

TEST(Score, AttributeIndexOutOfRangeThrows) {
  EXPECT_THROW(color_type_match(Tensor<double>({1, 12}), Tensor<double>({1, 10}), {12}, {0}), std::out_of_range);
  EXPECT_THROW(color_type_match(Tensor<double>({1, 12}), Tensor<double>({1, 10}), {0}, {-1}), std::out_of_range);
}

TEST(Score, EmptyBoxThrows) {
  Tensor<double> mask({1, 1, 3, 3}, 0.5);
  EXPECT_THROW(mask_prediction_ratio(mask, Tensor<double>({1, 1, 3, 3})), std::invalid_argument);
}

TEST(Score, MaskRatioIsBoxRestrictedMean) {
  Tensor<double> mask({1, 1, 2, 2}, std::vector<double>{0.2, 0.4, 0.9, 0.1});
  Tensor<double> box({1, 1, 2, 2}, std::vector<double>{1, 1, 0, 0});
  EXPECT_NEAR(mask_prediction_ratio(mask, box)[0], 0.3, 1e-12);
}

TEST(Score, CombineIsLinearAndMonotone) {
  const auto base = combine_scores(0.3, 0.5, 1.2);
  EXPECT_DOUBLE_EQ(base.prob, 0.3 + 0.5 + 0.5 * 1.2);
  EXPECT_NEAR(combine_scores(0.4, 0.5, 1.2).prob - base.prob, 0.1, 1e-12);
  EXPECT_NEAR(combine_scores(0.3, 0.7, 1.2).prob - base.prob, 0.2, 1e-12);
  EXPECT_NEAR(combine_scores(0.3, 0.5, 1.6).prob - base.prob, 0.2, 1e-12);
  EXPECT_DOUBLE_EQ(combine_scores(0.3, 0.5, 1.2, 2.0).prob, 0.3 + 0.5 + 2.4);
}

TEST(Loss, TotalIsWeightedSum) {
  auto p = perfect_batch();
  p.mask = Tensor<double>(p.box.shape(), 0.4);
  p.logits.image_color = random_tensor({2, 12}, 5, 3);
  p.bundle.text_generated = random_tensor({2, 8}, 6);
  p.future = random_tensor({2, 3, 6, 6}, 7);
  auto r = losses(p);
  EXPECT_GT(r.seg, 0);
  EXPECT_GT(r.cls, 0);
  EXPECT_GT(r.sub, 0);
  EXPECT_GT(r.fut, 0);
  EXPECT_NEAR(r.total_value, r.seg + 0.2 * r.cls + r.sub + 0.2 * r.fut, 1e-9);
  LossOptions o;
  o.lambda1 = 1.5;
  o.lambda2 = 0.0;
  auto s = losses(p, o);
  EXPECT_NEAR(s.total_value, s.seg + 1.5 * s.cls + s.sub, 1e-9);
}

TEST(Loss, PerfectPredictionsReachMinimum) {
  auto p = perfect_batch();
  auto r = losses(p);
  EXPECT_LT(r.seg, 1e-4);
  EXPECT_NEAR(r.sub, 0, 1e-9);
  EXPECT_EQ(r.fut, 0);
  LossOptions no_smoothing;
  no_smoothing.label_smoothing = 0;
  EXPECT_LT(losses(p, no_smoothing).cls, 1e-9);

  const auto mpr = mask_prediction_ratio(p.mask, p.box);
  const auto ss = substitution_similarity(p.bundle);
  const auto ctm = color_type_match(p.logits.image_color, p.logits.image_type, {3, 7}, {1, 9});
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(mpr[i], 1, 1e-6);
    EXPECT_NEAR(ss[i], 2, 1e-9);
    EXPECT_NEAR(ctm[i], 2, 1e-9);
    EXPECT_NEAR(combine_scores(mpr[i], ss[i], ctm[i]).prob, 4, 1e-6);
  }
}

TEST(Loss, MixedSignSubstitutionDiffers) {
  auto p = perfect_batch();
  LossOptions alt;
  alt.sub = SubLossMode::kMixedSign;
  EXPECT_NEAR(losses(p, alt).sub, 2, 1e-9);
  EXPECT_NEAR(losses(p).sub, 0, 1e-9);
}

TEST(Loss, PositiveOnlySegmentationIgnoresBackground) {
  auto p = perfect_batch();
  p.mask = Tensor<double>(p.box.shape(), upper_unit_bound<double>());
  LossOptions alt;
  alt.seg = SegLossMode::kPositiveOnly;
  EXPECT_LT(losses(p, alt).seg, 1e-4);
  EXPECT_GT(losses(p).seg, 1);
}

TEST(Loss, UnknownAttributeRowsIgnored) {
  auto p = perfect_batch();
  p.targets.colors = {3, -1};
  p.targets.types = {1, -1};
  const double before = losses(p).cls;
  for (auto* t : {&p.logits.text_color, &p.logits.image_color}) {
    for (std::size_t j = 0; j < 12; ++j) (*t)[12 + j] = static_cast<double>(j) * 5;
  }
  EXPECT_DOUBLE_EQ(losses(p).cls, before);

  p.targets.colors = {-1, -1};
  p.targets.types = {-1, -1};
  EXPECT_EQ(losses(p).cls, 0);
}

TEST(Loss, MissingNextFrameIsZeroedAndCounted) {
  auto p = perfect_batch();
  for (std::size_t i = 0; i < 108; ++i) p.future[i] += 3;  // sample 0 only
  p.targets.has_next = {false, true};
  auto r = losses(p);
  EXPECT_EQ(r.fut, 0);
  EXPECT_EQ(r.missing_future, 1u);
  p.targets.has_next = {true, true};
  EXPECT_NEAR(losses(p).fut, 9.0 / 2, 1e-9);
}

TEST(Loss, SubstitutionTargetsReceiveNoGradient) {
  auto p = perfect_batch();
  p.bundle.image_generated = random_tensor({2, 8}, 8);
  p.bundle.image_target.set_requires_grad();
  p.bundle.image_generated.set_requires_grad();
  Tape<double> tape;
  LossReport<double> r;
  {
    TapeScope<double> scope(tape);
    r = losses(p);
  }
  backward(r.total, tape);
  EXPECT_FALSE(p.bundle.image_target.has_grad());
  ASSERT_TRUE(p.bundle.image_generated.has_grad());
  double norm = 0;
  for (double g : p.bundle.image_generated.grad()) norm += g * g;
  EXPECT_GT(norm, 0);
}

TEST(Metrics, HandComputedRanks) {
  Ranking ranking{{"q1", {"a", "b", "c", "d"}}, {"q2", {"b", "a", "c", "d"}}, {"q3", {"b", "c", "d", "a"}}};
  std::map<std::string, std::string> gt{{"q1", "a"}, {"q2", "a"}, {"q3", "a"}};
  auto m = evaluate_ranking(ranking, gt, {1, 2, 5});
  EXPECT_NEAR(m.mrr, (1 + 0.5 + 0.25) / 3, 1e-12);
  EXPECT_NEAR(m.mrr, 0.583333, 1e-6);
  EXPECT_NEAR(m.recall[1], 1.0 / 3, 1e-12);
  EXPECT_NEAR(m.recall[2], 2.0 / 3, 1e-12);
  EXPECT_NEAR(m.recall[5], 1.0, 1e-12);
  EXPECT_EQ(m.queries, 3u);
}

TEST(Metrics, AllPermutationsMatchClosedForm) {
  std::vector<std::string> ids{"a", "b", "c", "d", "e"};
  Ranking ranking;
  std::map<std::string, std::string> gt;
  int q = 0;
  do {
    const auto name = "q" + std::to_string(q++);
    ranking[name] = ids;
    gt[name] = "c";
  } while (std::next_permutation(ids.begin(), ids.end()));
  auto m = evaluate_ranking(ranking, gt, {1, 3});
  EXPECT_EQ(m.queries, 120u);
  EXPECT_NEAR(m.mrr, (1 + 1.0 / 2 + 1.0 / 3 + 1.0 / 4 + 1.0 / 5) / 5, 1e-12);
  EXPECT_NEAR(m.recall[1], 0.2, 1e-12);
  EXPECT_NEAR(m.recall[3], 0.6, 1e-12);
}

TEST(Metrics, Errors) {
  std::map<std::string, std::string> gt{{"q", "a"}};
  EXPECT_THROW(evaluate_ranking({}, gt), MetricsError);
  EXPECT_THROW(evaluate_ranking({{"q", {"b", "c"}}}, gt), MetricsError);
  EXPECT_THROW(evaluate_ranking({{"r", {"a"}}}, gt), MetricsError);
  EXPECT_EQ(rank_of({"x", "y", "z"}, "z", "q"), 3u);
}
