#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "olive/autodiff.hpp"
#include "olive/gradcheck.hpp"
#include "olive/random.hpp"
#include "gradient_suite.hpp"

using namespace olive;

namespace {

Tensor64 rand64(Rng& rng, Shape shape, double sd = 1.0) { return random_normal<double>(rng, std::move(shape), sd); }

using Vars64 = std::span<const BasicVar<double>>;

}  // namespace

TEST(Matmul, IdentityTimesMatrix) {
  Tape tape;
  auto eye = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  auto out = matmul(eye, m);
  EXPECT_EQ(out.value(), Tensor::matrix(2, 2, {1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tape tape;
  auto out = matmul(tape.constant(Tensor::matrix(1, 2, {1, 2})), tape.constant(Tensor::matrix(2, 1, {3, 4})));
  ASSERT_EQ(out.value().size(), 1u);
  EXPECT_FLOAT_EQ(out.value()[0], 11.0f);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  Tape tape;
  auto a = tape.constant(Tensor({2, 3}));
  auto b = tape.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected a dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Dimension);
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(7);
  const auto a = rand64(rng, {5, 7});
  const auto b = rand64(rng, {7, 3});
  const double err = finite_diff_check_all<double>(
      [](BasicTape<double>&, Vars64 v) { return sum(matmul(v[0], v[1])); }, {a, b}, {1e-3, 1});
  EXPECT_LE(err, 1e-4);
}

TEST(Softmax, SymmetricPairIsHalf) {
  Tape tape;
  auto y = softmax(tape.constant(Tensor::vector({0, 0})));
  EXPECT_FLOAT_EQ(y.value()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.value()[1], 0.5f);
}

TEST(Softmax, StableUnderLargeShift) {
  Tape tape;
  auto y = softmax(tape.constant(Tensor::vector({1000, 1000})));
  EXPECT_FLOAT_EQ(y.value()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.value()[1], 0.5f);
}

TEST(Softmax, ClosedFormQuarterThreeQuarters) {
  // e^0 / (e^0 + e^{ln 3}) = 1/4
  BasicTape<double> tape;
  auto y = softmax(tape.constant(Tensor64::vector({0.0, std::log(3.0)})));
  EXPECT_NEAR(y.value()[0], 0.25, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.75, 1e-12);
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  Tape tape;
  auto x = tape.constant(Tensor::vector({0.0f, std::nanf("")}));
  try {
    softmax(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Numeric);
  }
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t rows = 1 + rng.index(6), cols = 1 + rng.index(9);
    Tensor x = random_normal(rng, {rows, cols}, 3.0);
    Tensor shifted = x;
    for (std::size_t r = 0; r < rows; ++r) {
      const float c = static_cast<float>(rng.normal(0, 5));
      for (auto& v : shifted.row(r)) v += c;
    }
    Tape tape;
    const auto y = softmax(tape.constant(x)).value();
    const auto ys = softmax(tape.constant(shifted)).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (auto v : y.row(r)) total += v;
      EXPECT_NEAR(total, 1.0, 1e-6);
      for (std::size_t c = 0; c < cols; ++c) EXPECT_NEAR(y(r, c), ys(r, c), 1e-6);
    }
  }
}

TEST(Softmax, ColumnAxis) {
  Tape tape;
  auto y = softmax(tape.constant(Tensor::matrix(2, 2, {0, 5, 0, 5})), 0).value();
  EXPECT_FLOAT_EQ(y(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(y(1, 1), 0.5f);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tape tape;
  auto x = tape.constant(Tensor::matrix(1, 4, {3, 3, 3, 3}));
  auto g = tape.constant(Tensor::vector({1, 1, 1, 1}));
  auto b = tape.constant(Tensor::vector({0, 0, 0, 0}));
  auto y = layer_norm(x, g, b).value();
  for (auto v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, PlusMinusOneIsNearlyUnchanged) {
  Tape tape;
  auto y = layer_norm(tape.constant(Tensor::matrix(1, 2, {-1, 1})), tape.constant(Tensor::vector({1, 1})),
                      tape.constant(Tensor::vector({0, 0})))
               .value();
  // 1 / sqrt(1 + 1e-5)
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
}

TEST(LayerNorm, GradientCheck) {
  Rng rng(3);
  const auto x = rand64(rng, {4, 8});
  const auto g = rand64(rng, {8});
  const auto b = rand64(rng, {8});
  const auto w = rand64(rng, {4, 8});
  const double err = finite_diff_check_all<double>(
      [&](BasicTape<double>& tape, Vars64 v) {
        return sum(mul(layer_norm(v[0], v[1], v[2]), tape.constant(w)));
      },
      {x, g, b});
  EXPECT_LE(err, 1e-4);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape tape;
  auto logits = tape.constant(Tensor({3, 4}));
  const std::vector<int> targets{0, 3, 2};
  EXPECT_NEAR(cross_entropy(logits, std::span<const int>(targets)).value()[0], std::log(4.0), 1e-6);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  Tape tape;
  auto logits = tape.constant(Tensor::matrix(1, 3, {0, 50, 0}));
  const std::vector<int> targets{1};
  EXPECT_LT(cross_entropy(logits, std::span<const int>(targets)).value()[0], 1e-6);
}

TEST(CrossEntropy, MatchesBruteForceLogSoftmax) {
  Rng rng(5);
  const auto logits = rand64(rng, {6, 10}, 2.0);
  std::vector<int> targets{3, -100, 9, 0, 4, -100};
  double oracle = 0;
  int count = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (targets[r] < 0) continue;
    double z = 0;
    for (std::size_t c = 0; c < 10; ++c) z += std::exp(logits(r, c));
    oracle += -(logits(r, targets[r]) - std::log(z));
    ++count;
  }
  oracle /= count;
  BasicTape<double> tape;
  auto loss = cross_entropy(tape.constant(logits), std::span<const int>(targets), -100);
  EXPECT_NEAR(loss.value()[0], oracle, 1e-6);
}

TEST(CrossEntropy, AllIgnoredIsDomainError) {
  Tape tape;
  std::vector<int> targets{-100, -100};
  try {
    cross_entropy(tape.constant(Tensor({2, 3})), std::span<const int>(targets), -100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Domain);
  }
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  auto w = tape.param(Tensor::vector({0.3f, -2.0f, 5.0f}));
  tape.backward(sum(w));
  EXPECT_EQ(tape.grad(w), Tensor::vector({1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tape tape;
  auto w = tape.param(Tensor::vector({1, 2}));
  tape.backward(sum(mul(w, w)));
  EXPECT_EQ(tape.grad(w), Tensor::vector({2, 4}));
}

TEST(Backward, NonScalarLossIsUsageError) {
  Tape tape;
  auto w = tape.param(Tensor::vector({1, 2}));
  try {
    tape.backward(mul(w, w));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Usage);
  }
}

TEST(Backward, DeterministicBitIdentical) {
  auto run = [] {
    Rng rng(99);
    Tape tape;
    auto x = tape.param(random_normal(rng, {6, 12}, 1.0));
    auto w = tape.param(random_normal(rng, {12, 12}, 0.3));
    auto g = tape.param(random_normal(rng, {12}, 1.0));
    auto b = tape.param(random_normal(rng, {12}, 1.0));
    auto h = gelu(layer_norm(matmul(x, w), g, b));
    auto a = attention(h, h, h, 3, true);
    std::vector<int> targets{1, 2, 3, 4, 5, 6};
    tape.backward(cross_entropy(a, std::span<const int>(targets)));
    return std::vector<Tensor>{tape.grad(x), tape.grad(w), tape.grad(g), tape.grad(b)};
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiffCheck, SumIsExact) {
  Rng rng(1);
  const auto x = rand64(rng, {3, 4});
  EXPECT_LE(finite_diff_check<double>([](BasicTape<double>&, BasicVar<double> v) { return sum(v); }, x), 1e-6);
}

TEST(FiniteDiffCheck, SumOfSoftmaxHasZeroGradient) {
  Rng rng(2);
  const auto x = rand64(rng, {2, 5});
  BasicTape<double> tape;
  auto v = tape.param(x);
  tape.backward(sum(softmax(v)));
  const auto grad = tape.grad(v);
  for (auto g : grad.values()) EXPECT_NEAR(g, 0.0, 1e-12);
  // Both routes are ~0, so the relative error reduces to noise / 1e-8 floor.
  EXPECT_LE(finite_diff_check<double>([](BasicTape<double>&, BasicVar<double> v) { return sum(softmax(v)); }, x),
            1.0);
}

TEST(FiniteDiffCheck, TwoLayerMlp) {
  Rng rng(4);
  const auto x = rand64(rng, {5, 6});
  const auto w1 = rand64(rng, {6, 8}, 0.5);
  const auto b1 = rand64(rng, {8}, 0.1);
  const auto w2 = rand64(rng, {8, 3}, 0.5);
  const double err = finite_diff_check_all<double>(
      [](BasicTape<double>&, Vars64 v) {
        auto h = gelu(add(matmul(v[0], v[1]), v[2]));
        auto out = matmul(h, v[3]);
        return sum(mul(out, out));
      },
      {x, w1, b1, w2}, {1e-3, 1});
  EXPECT_LE(err, 1e-4);
}

// Every primitive, >= 20 random shapes and seeds.
TEST(GradientProperty, EveryPrimitivePassesOnRandomShapes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& c : gradient_suite::primitive_cases(seed))
      EXPECT_LE(c.error, c.tolerance) << c.name << " seed " << seed;
}

// The fused attention kernel agrees with a direct per-head loop.
TEST(Attention, MatchesDirectComputation) {
  Rng rng(21);
  const std::size_t len = 5, width = 6, heads = 2, dh = 3;
  const auto q = rand64(rng, {len, width}), k = rand64(rng, {len, width}), v = rand64(rng, {len, width});
  for (bool causal : {false, true}) {
    BasicTape<double> tape;
    const auto out = attention(tape.constant(q), tape.constant(k), tape.constant(v), heads, causal).value();
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t vis = causal ? i + 1 : len;
        std::vector<double> w(vis);
        double z = 0;
        for (std::size_t j = 0; j < vis; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += q(i, h * dh + c) * k(j, h * dh + c);
          w[j] = std::exp(s / std::sqrt(3.0));
          z += w[j];
        }
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < vis; ++j) acc += w[j] / z * v(j, h * dh + c);
          EXPECT_NEAR(out(i, h * dh + c), acc, 1e-12);
        }
      }
    }
  }
}

TEST(Tensor, InvalidShapesRejected) {
  EXPECT_THROW(Tensor({2, 0}), Error);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), Error);
}
