// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "rrcore/numerics.hpp"

using namespace rrcore;
using T = Tensor<double>;

namespace {

T random_tensor(Shape s, std::mt19937_64 &rng, double lo = -1.0, double hi = 1.0,
                bool requires_grad = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(s.size());
  for (auto &x : v)
    x = d(rng);
  return T(s, v, requires_grad);
}

// Straight-line GRU in long double, written from the gate equations.
std::vector<long double> gru_oracle(const std::vector<double> &x, const std::vector<double> &h,
                                    const GruWeights<double> &w) {
  const std::size_t I = x.size(), H = h.size();
  auto W = [&](std::size_t i, std::size_t j) { return (long double)w.W.values()[i * 3 * H + j]; };
  auto U = [&](std::size_t i, std::size_t j) { return (long double)w.U.values()[i * 2 * H + j]; };
  auto Uh = [&](std::size_t i, std::size_t j) { return (long double)w.Uh.values()[i * H + j]; };
  auto b = [&](std::size_t j) { return (long double)w.b.values()[j]; };
  auto sig = [](long double v) { return 1.0L / (1.0L + std::exp(-v)); };
  std::vector<long double> z(H), r(H), out(H);
  for (std::size_t j = 0; j < H; ++j) {
    long double az = b(j), ar = b(H + j);
    for (std::size_t i = 0; i < I; ++i) {
      az += x[i] * W(i, j);
      ar += x[i] * W(i, H + j);
    }
    for (std::size_t i = 0; i < H; ++i) {
      az += h[i] * U(i, j);
      ar += h[i] * U(i, H + j);
    }
    z[j] = sig(az);
    r[j] = sig(ar);
  }
  for (std::size_t j = 0; j < H; ++j) {
    long double ac = b(2 * H + j);
    for (std::size_t i = 0; i < I; ++i)
      ac += x[i] * W(i, 2 * H + j);
    for (std::size_t i = 0; i < H; ++i)
      ac += r[i] * h[i] * Uh(i, j);
    const long double cand = std::tanh(ac);
    out[j] = (1.0L - z[j]) * h[j] + z[j] * cand;
  }
  return out;
}

} // namespace

TEST(MaskedSoftmax, SymmetricInputIsUniform) {
  auto y = masked_softmax(T::row({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(0, 1), 0.5);
}

TEST(MaskedSoftmax, MatchesLogisticOracle) {
  auto y = masked_softmax(T::row({1.0, 2.0}));
  const long double e = std::exp(1.0L);
  EXPECT_NEAR(y(0, 0), static_cast<double>(1.0L / (1.0L + e)), 1e-12);
  EXPECT_NEAR(y(0, 1), static_cast<double>(e / (1.0L + e)), 1e-12);
  EXPECT_NEAR(y(0, 0), 0.2689414, 1e-7);
  EXPECT_NEAR(y(0, 1), 0.7310586, 1e-7);
}

TEST(MaskedSoftmax, MaskedEntriesGetExactlyZero) {
  const std::uint8_t mask[] = {1, 0, 1};
  auto y = masked_softmax(T::row({0.3, 50.0, -0.2}), mask);
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_NEAR(y(0, 0) + y(0, 2), 1.0, 1e-15);
}

TEST(MaskedSoftmax, AllMaskedThrows) {
  const std::uint8_t mask[] = {0, 0};
  EXPECT_THROW(masked_softmax(T::row({1.0, 2.0}), mask), ShapeError);
}

TEST(MaskedSoftmax, NormalizedAndNonNegativeOnRandomRows) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 17;
    auto x = random_tensor({1, n}, rng, -30.0, 30.0);
    std::vector<std::uint8_t> mask(n);
    for (auto &m : mask)
      m = coin(rng);
    mask[trial % n] = 1;
    auto y = masked_softmax(x, mask);
    double s = 0;
    for (double v : y.values()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Dropout, ZeroRateAndEvalModeAreIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 4}, rng);
  auto y = dropout(x, 0.0, true, rng);
  auto z = dropout(x, 0.5, false, rng);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(y.values()[i], x.values()[i]);
    EXPECT_EQ(z.values()[i], x.values()[i]);
  }
}

TEST(Dropout, KeptUnitsAreRescaled) {
  std::mt19937_64 rng(2);
  T x({1, 1000}, std::vector<double>(1000, 1.0));
  auto y = dropout(x, 0.25, true, rng);
  std::size_t kept = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
    kept += v != 0.0;
  }
  EXPECT_GT(kept, 650u);
  EXPECT_LT(kept, 850u);
  EXPECT_THROW(dropout(x, 1.0, true, rng), ConfigError);
}

TEST(Kernel, ShapeMismatchReportsBothShapes) {
  T a({2, 3}), b({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError &e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("vs"), std::string::npos);
  }
  EXPECT_THROW(add(T({2, 3}), T({3, 2})), ShapeError);
  EXPECT_THROW(mul(T({1, 3}), T({1, 4})), ShapeError);
}

TEST(Kernel, BiasBroadcastAddsRowToEveryRow) {
  T a({2, 2}, {1, 2, 3, 4});
  auto y = add(a, T::row({10, 20}));
  EXPECT_EQ(y(0, 0), 11);
  EXPECT_EQ(y(1, 1), 24);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(3);
  auto W = random_tensor({3, 5}, rng, -1, 1, true);
  backward(sum(W));
  for (double g : W.grad())
    EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquaredErrorHandChainRule) {
  auto w = T::scalar(1.0, true);
  auto x = T::scalar(2.0);
  auto y = T::scalar(0.0);
  auto r = sub(mul(w, x), y);
  backward(mul(r, r));
  EXPECT_DOUBLE_EQ(w.grad()[0], 8.0);
  EXPECT_FALSE(x.has_grad());
  EXPECT_FALSE(y.has_grad());
}

TEST(Backward, NonScalarLossThrows) {
  auto w = T({2, 2}, true);
  EXPECT_THROW(backward(add(w, w)), ShapeError);
}

TEST(Backward, SharedSubgraphAccumulates) {
  auto w = T::scalar(3.0, true);
  auto sq = mul(w, w);
  backward(add(sq, sq)); // 2 w^2
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
}

TEST(Backward, DeterministicBitwise) {
  std::mt19937_64 rng(5);
  auto A = random_tensor({4, 6}, rng, -1, 1, true);
  auto B = random_tensor({6, 3}, rng, -1, 1, true);
  auto run = [&] {
    A.zero_grad();
    B.zero_grad();
    auto scores = matmul(tanh(matmul(A, B)), T({3, 1}, {1, 2, 3}));
    auto y = masked_softmax(transpose(scores));
    backward(log(pick(y, 2)));
    return std::make_pair(std::vector<double>(A.grad().begin(), A.grad().end()),
                          std::vector<double>(B.grad().begin(), B.grad().end()));
  };
  auto g1 = run();
  auto g2 = run();
  EXPECT_EQ(g1, g2);
}

// Every kernel op checked against central differences at 10 random points.
TEST(GradCheck, KernelOps) {
  const std::uint8_t mask[] = {1, 1, 0, 1, 1};
  const int ids[] = {2, 0, 2, 4};
  const int scatter_ids[] = {1, 3, 1, 0, 3};
  std::vector<std::pair<const char *, std::function<T(const T &)>>> cases = {
      {"matmul_left", [](const T &x) { return sum(matmul(x, T({5, 2}, {1, -2, .5, 3, -1, .2, .7, .1, -.4, 2}))); }},
      {"matmul_right", [](const T &x) { return sum(tanh(matmul(T({2, 1}, {1, -2}), slice_cols(x, 0, 3)))); }},
      {"add_bcast", [](const T &x) { return sum(tanh(add(concat_rows<double>(std::vector<T>{x, x}), slice_rows(x, 0, 1)))); }},
      {"sub", [](const T &x) { return sum(mul(sub(x, tanh(x)), x)); }},
      {"mul", [](const T &x) { return sum(mul(x, exp(x))); }},
      {"scale", [](const T &x) { return sum(tanh(scale(x, -1.7))); }},
      {"mul_scalar", [](const T &x) { return sum(mul_scalar(tanh(x), pick(x, 3))); }},
      {"one_minus", [](const T &x) { return sum(mul(one_minus(sigmoid(x)), x)); }},
      {"concat", [](const T &x) { return sum(tanh(concat_cols(x, scale(x, 2.0)))); }},
      {"slice", [](const T &x) { return sum(mul(slice_cols(x, 1, 4), slice_cols(x, 0, 3))); }},
      {"transpose", [](const T &x) { return sum(matmul(transpose(x), tanh(x))); }},
      {"tanh", [](const T &x) { return sum(tanh(x)); }},
      {"sigmoid", [](const T &x) { return sum(mul(sigmoid(x), x)); }},
      {"exp", [](const T &x) { return sum(exp(x)); }},
      {"log", [](const T &x) { return sum(log(add(exp(x), T({1, 5}, std::vector<double>(5, 1.0))))); }},
      {"embedding", [&](const T &x) { return sum(tanh(embedding_lookup<double, int>(transpose(x), ids))); }},
      {"masked_softmax", [&](const T &x) { return log(pick(masked_softmax(x, mask), 3)); }},
      {"scatter_add", [&](const T &x) { return sum(mul(scatter_add_cols<double, int>(x, scatter_ids, 4), T::row({1, -2, 3, .5}))); }},
      {"pad_cols", [](const T &x) { return sum(tanh(pad_cols(x, 8))); }},
  };
  std::mt19937_64 rng(42);
  for (const auto &[name, f] : cases) {
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
      auto point = random_tensor({1, 5}, rng);
      worst = std::max(worst, grad_check(f, point, 1e-4));
    }
    EXPECT_LT(worst, 1e-3) << name;
  }
}

TEST(GradCheck, SumHasZeroError) {
  std::mt19937_64 rng(7);
  auto point = random_tensor({3, 3}, rng);
  EXPECT_LT(grad_check([](const T &x) { return sum(x); }, point), 1e-8);
}

TEST(GradCheck, SoftmaxNllComposite) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto point = random_tensor({1, 6}, rng, -2, 2);
    double err = grad_check(
        [](const T &x) { return scale(log(pick(masked_softmax(x), 4), 1e-12), -1.0); }, point);
    EXPECT_LT(err, 1e-3);
  }
}

TEST(GradCheck, MaskedPositionHasExactlyZeroGradient) {
  const std::uint8_t mask[] = {1, 0, 1, 1};
  T x({1, 4}, {0.1, 2.0, -0.3, 0.5}, true);
  backward(log(pick(masked_softmax(x, mask), 2)));
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_NE(x.grad()[0], 0.0);
}

TEST(Gru, ZeroWeightsHalveState) {
  GruWeights<double> w{T({3, 6}), T({2, 4}), T({2, 2}), T({1, 6})};
  T h = T::row({0.8, -0.4});
  auto out = gru_cell(T::row({1.0, 2.0, 3.0}), h, w);
  EXPECT_DOUBLE_EQ(out(0, 0), 0.4);
  EXPECT_DOUBLE_EQ(out(0, 1), -0.2);
}

TEST(Gru, FixedPointWhenCandidateEqualsState) {
  // tanh(b_h) = h_prev with W, U_h zero makes the candidate equal h_prev.
  const double h0 = 0.3;
  std::vector<double> b(3, 0.0);
  b[2] = std::atanh(h0);
  std::mt19937_64 rng(1);
  GruWeights<double> w{T({2, 3}), random_tensor({1, 2}, rng), T({1, 1}), T({1, 3}, b)};
  auto out = gru_cell(T::row({0.5, -0.5}), T::row({h0}), w);
  EXPECT_NEAR(out(0, 0), h0, 1e-15);
}

TEST(Gru, MatchesScalarOracle) {
  std::mt19937_64 rng(9);
  auto w = GruWeights<double>::init(5, 4, rng);
  for (auto *t : {&w.W, &w.U, &w.Uh, &w.b})
    for (auto &v : t->values())
      v = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({1, 5}, rng);
    auto h = random_tensor({1, 4}, rng);
    auto out = gru_cell(x, h, w);
    auto ref = gru_oracle({x.values().begin(), x.values().end()},
                          {h.values().begin(), h.values().end()}, w);
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(out(0, j), static_cast<double>(ref[j]), 1e-6);
  }
}

TEST(Gru, OutputStaysInsideUnitBox) {
  std::mt19937_64 rng(10);
  auto w = GruWeights<double>::init(3, 6, rng);
  for (auto &v : w.W.values())
    v *= 3.0;
  auto h = random_tensor({1, 6}, rng, -0.999, 0.999);
  for (int t = 0; t < 50; ++t) {
    h = gru_cell(random_tensor({1, 3}, rng, -5, 5), h, w);
    // Closed bounds: tanh saturates to exactly +-1 in floating point.
    for (double v : h.values()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Gru, BatchRowsAreIndependent) {
  std::mt19937_64 rng(12);
  auto w = GruWeights<double>::init(3, 4, rng);
  auto x = random_tensor({2, 3}, rng);
  auto h = random_tensor({2, 4}, rng);
  auto both = gru_cell(x, h, w);
  auto second = gru_cell(slice_rows(x, 1, 2), slice_rows(h, 1, 2), w);
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_DOUBLE_EQ(both(1, j), second(0, j));
  EXPECT_THROW(gru_cell(x, slice_rows(h, 0, 1), w), ShapeError);
}

TEST(Gru, GradCheckThroughTwoSteps) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = GruWeights<double>::init(3, 4, rng);
    auto x1 = random_tensor({1, 3}, rng), x2 = random_tensor({1, 3}, rng);
    T params[] = {w.W, w.U, w.Uh, w.b};
    auto rep = grad_check_all(
        [&] {
          auto h = gru_cell(x1, T({1, 4}), w);
          h = gru_cell(x2, h, w);
          return sum(mul(h, h));
        },
        std::span<T>(params));
    EXPECT_LT(rep.max_rel_error, 1e-3);
  }
}

TEST(NoGrad, GuardSkipsGraphRecording) {
  auto w = T::scalar(2.0, true);
  {
    NoGradGuard g;
    auto y = mul(w, w);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(mul(w, w).requires_grad());
}
