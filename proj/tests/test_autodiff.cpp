#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "sbnet/sbnet.hpp"

using namespace sbnet;

namespace {

Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Weighted sum so every output coordinate carries a distinct gradient.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  return sum_all(mul(y, random_tensor(y.shape(), seed)));
}

double check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x) {
  return grad_check<double>([&](const Tensor<double>& in) { return probe(f(in)); }, x, 1e-6);
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(t.dim(2), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Tensor, CopiesAliasAndCloneDoesNot) {
  Tensor<float> a({2}, std::vector<float>{1, 2});
  Tensor<float> alias = a;
  Tensor<float> copy = a.clone();
  a[0] = 7;
  EXPECT_EQ(alias[0], 7);
  EXPECT_EQ(copy[0], 1);
  EXPECT_TRUE(alias.same_storage(a));
  EXPECT_FALSE(copy.same_storage(a));
}

TEST(Ops, BroadcastAdd) {
  Tensor<float> a({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  Tensor<float> b({3}, std::vector<float>{10, 20, 30});
  auto c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_FLOAT_EQ(c[4], 25);
  EXPECT_THROW(add(a, Tensor<float>({2})), ShapeError);
}

TEST(Ops, SoftmaxOfScaledScores) {
  // Scores [2, 0] divided by sqrt(4).
  Tensor<double> x({1, 2}, std::vector<double>{2.0 / std::sqrt(4.0), 0.0});
  auto p = softmax(x, -1);
  EXPECT_NEAR(p[0], 0.7311, 1e-4);
  EXPECT_NEAR(p[1], 0.2689, 1e-4);
}

TEST(Ops, SoftmaxRowsSumToOneForLargeInputs) {
  auto x = random_tensor({4, 7}, 3, -500, 500);
  auto p = softmax(x, -1);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 7; ++k) {
      EXPECT_TRUE(std::isfinite(p[r * 7 + k]));
      s += p[r * 7 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Ops, MatmulMatchesNaiveProduct) {
  auto a = random_tensor({2, 3, 4}, 1);
  auto b = random_tensor({2, 4, 5}, 2);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(n * 3 + i) * 4 + k] * b[(n * 4 + k) * 5 + j];
        EXPECT_NEAR(c[(n * 3 + i) * 5 + j], s, 1e-12);
      }
    }
  }
}

TEST(Ops, Conv2dMatchesDirectSum) {
  auto x = random_tensor({1, 2, 5, 5}, 4);
  auto w = random_tensor({3, 2, 3, 3}, 5);
  auto y = conv2d<double>(x, w, nullptr, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t ki = 0; ki < 3; ++ki) {
            for (std::size_t kj = 0; kj < 3; ++kj) {
              const long yy = static_cast<long>(i * 2 + ki) - 1, xx = static_cast<long>(j * 2 + kj) - 1;
              if (yy < 0 || xx < 0 || yy >= 5 || xx >= 5) continue;
              s += x[(c * 5 + yy) * 5 + xx] * w[((o * 2 + c) * 3 + ki) * 3 + kj];
            }
          }
        }
        EXPECT_NEAR(y[(o * 3 + i) * 3 + j], s, 1e-12);
      }
    }
  }
}

TEST(Gradients, ElementwiseOps) {
  auto x = random_tensor({3, 4}, 10, 0.2, 2.0);
  auto y = random_tensor({3, 4}, 11, 0.5, 1.5);
  EXPECT_LT(check([&](const auto& t) { return mul(t, y); }, x), 1e-6);
  EXPECT_LT(check([&](const auto& t) { return div(y, t); }, x), 1e-6);
  EXPECT_LT(check([&](const auto& t) { return sub(t, y); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return log(t); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return sqrt(t); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return sigmoid(t); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return square(t); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return leaky_relu(add_scalar(t, -1.0), 0.1); }, x), 1e-6);
}

TEST(Gradients, BroadcastReducesIntoSmallerOperand) {
  auto x = random_tensor({4}, 12);
  auto big = random_tensor({3, 4}, 13);
  EXPECT_LT(check([&](const auto& t) { return mul(big, t); }, x), 1e-6);
}

TEST(Gradients, ShapeOps) {
  auto x = random_tensor({2, 3, 4}, 14);
  EXPECT_LT(check([](const auto& t) { return permute(t, {2, 0, 1}); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return transpose(t); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return slice(t, 1, 1, 2); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return concat<double>({t, scale(t, 2.0)}, 2); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return sum(t, 1); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return mean(t, -1, true); }, x), 1e-6);
  EXPECT_LT(check([](const auto& t) { return softmax(t, 1); }, x), 1e-6);
}

TEST(Gradients, MatmulLinearConv) {
  auto a = random_tensor({2, 3, 4}, 15);
  auto b = random_tensor({2, 4, 5}, 16);
  EXPECT_LT(check([&](const auto& t) { return matmul(t, b); }, a), 1e-6);
  EXPECT_LT(check([&](const auto& t) { return matmul(a, t); }, b), 1e-6);
  auto w = random_tensor({6, 4}, 17);
  auto bias = random_tensor({6}, 18);
  EXPECT_LT(check([&](const auto& t) { return linear(a, t, &bias); }, w), 1e-6);
  EXPECT_LT(check([&](const auto& t) { return linear(a, w, &t); }, bias), 1e-6);
  auto x = random_tensor({2, 2, 6, 6}, 19);
  auto k = random_tensor({3, 2, 3, 3}, 20);
  EXPECT_LT(check([&](const auto& t) { return conv2d<double>(t, k, nullptr, 2, 1); }, x), 1e-6);
  EXPECT_LT(check([&](const auto& t) { return conv2d<double>(x, t, nullptr, 1, 1); }, k), 1e-6);
}

TEST(Gradients, EmbeddingAccumulatesRepeatedIds) {
  auto table = random_tensor({5, 3}, 21);
  EXPECT_LT(check([](const auto& t) { return embedding(t, {1, 3, 1, 0}, {2, 2}); }, table), 1e-6);
}

TEST(Gradients, NormalizationAndLosses) {
  auto x = random_tensor({4, 3, 2, 2}, 22);
  auto gamma = random_tensor({3}, 23, 0.5, 1.5);
  auto beta = random_tensor({3}, 24);
  RunningStats<double> stats(3);
  EXPECT_LT(check([&](const auto& t) { return batch_norm(t, gamma, beta, stats, true); }, x), 1e-5);

  auto u = random_tensor({3, 5}, 25);
  auto v = random_tensor({3, 5}, 26);
  EXPECT_LT(check([&](const auto& t) { return cosine_similarity(t, v); }, u), 1e-6);

  auto p = random_tensor({2, 6}, 27, 0.05, 0.95);
  auto target = random_tensor({2, 6}, 28, 0, 1);
  EXPECT_LT(check([&](const auto& t) { return binary_cross_entropy(t, target); }, p), 1e-6);

  auto logits = random_tensor({3, 4}, 29);
  EXPECT_LT(check([](const auto& t) { return cross_entropy(t, {2, -1, 0}, 0.1); }, logits), 1e-6);
}

TEST(Gradients, CorruptedAdjointIsDetected) {
  // Correct forward value, adjoint off by a factor of two.
  auto bad_square = [](const Tensor<double>& t) {
    return detail::unary(t, [](double v) { return v * v; }, [](double v, double) { return 4 * v; });
  };
  auto x = random_tensor({5}, 30, 0.5, 1.5);
  EXPECT_GT(check(bad_square, x), 1e-2);
  EXPECT_LT(check([](const auto& t) { return square(t); }, x), 1e-6);
}

TEST(Tape, BackwardAccumulatesAcrossUses) {
  Tensor<double> x({1}, std::vector<double>{3});
  x.set_requires_grad();
  Tape<double> tape;
  Tensor<double> y;
  {
    TapeScope<double> scope(tape);
    y = add(mul(x, x), x);  // x^2 + x
  }
  backward(y, tape);
  EXPECT_DOUBLE_EQ(x.grad()[0], 7);
}

TEST(Tape, NoTapeScopeRecordsNothing) {
  Tensor<double> x({2}, 1.0);
  x.set_requires_grad();
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoTapeScope<double> off;
    auto y = mul(x, x);
  }
  EXPECT_EQ(tape.size(), 0u);
  auto y = mul(x, x);
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Tape, DetachStopsGradient) {
  Tensor<double> x({1}, std::vector<double>{2});
  x.set_requires_grad();
  Tape<double> tape;
  Tensor<double> y;
  {
    TapeScope<double> scope(tape);
    y = mul(x, x.detach());
  }
  backward(y, tape);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  Tensor<double> w({3}, std::vector<double>{1, -2, 0.5});
  w.set_requires_grad();
  ParamList<double> params{{"w", w}};
  AdamOptions options;
  options.lr = 0.1;
  options.weight_decay = 0;
  Adam<double> adam(params, options);
  auto g = w.grad();
  g[0] = 3;
  g[1] = -0.01;
  g[2] = 0.5;
  adam.step();
  EXPECT_NEAR(w[0], 0.9, 1e-6);
  EXPECT_NEAR(w[1], -1.9, 1e-4);
  EXPECT_NEAR(w[2], 0.4, 1e-6);
  EXPECT_EQ(adam.step_count(), 1u);
  EXPECT_FALSE(w.has_grad());
}

TEST(Adam, MinimizesQuadratic) {
  Tensor<double> w({2}, std::vector<double>{3, -4});
  w.set_requires_grad();
  AdamOptions options;
  options.lr = 0.05;
  options.weight_decay = 0;
  Adam<double> adam({{"w", w}}, options);
  for (int i = 0; i < 500; ++i) {
    Tape<double> tape;
    Tensor<double> loss;
    {
      TapeScope<double> scope(tape);
      loss = sum_all(square(w));
    }
    backward(loss, tape);
    adam.step();
  }
  EXPECT_NEAR(w[0], 0, 1e-2);
  EXPECT_NEAR(w[1], 0, 1e-2);
}

TEST(Adam, MissingGradientNamesParameter) {
  Tensor<double> w({2}, 1.0);
  w.set_requires_grad();
  Adam<double> adam({{"head.weight", w}}, AdamOptions{});
  try {
    adam.step();
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos);
  }
}

TEST(Schedule, StepDecay) {
  EXPECT_DOUBLE_EQ(step_decay_lr(3e-5, {5, 8}, 0), 3e-5);
  EXPECT_DOUBLE_EQ(step_decay_lr(3e-5, {5, 8}, 4), 3e-5);
  EXPECT_NEAR(step_decay_lr(3e-5, {5, 8}, 5), 3e-6, 1e-18);
  EXPECT_NEAR(step_decay_lr(3e-5, {5, 8}, 9), 3e-7, 1e-18);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Initializer init(5);
  auto a = init.uniform<float>({3, 4}, 1.0);
  auto b = init.uniform<float>({7}, 1.0);
  const auto path = (std::filesystem::temp_directory_path() / "sbnet_ckpt_test.sbnt").string();
  save_checkpoint<float>(path, {{"a", a}, {"b", b}});
  Tensor<float> a2({3, 4}), b2({7});
  ParamList<float> restored{{"a", a2}, {"b", b2}};
  load_checkpoint(path, restored);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], a2[i]);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b[i], b2[i]);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadInput) {
  EXPECT_THROW(decode_checkpoint("nope"), CheckpointError);
  Tensor<float> a({2}, 1.0f);
  auto bytes = encode_checkpoint(snapshot<float>({{"a", a}}));
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  Tensor<float> wrong({3});
  ParamList<float> mismatch{{"a", wrong}};
  EXPECT_THROW(restore(decode_checkpoint(bytes), mismatch), CheckpointError);
  Tensor<float> other({2});
  ParamList<float> missing{{"b", other}};
  EXPECT_THROW(restore(decode_checkpoint(bytes), missing), CheckpointError);
}
