// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#include <chip/tensor.hpp>

#include <bit>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

using namespace chip;

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

// Analytic gradients of fn at `inputs` against central differences on every
// coordinate. The reduction to a scalar uses fixed random weights so that every
// output element contributes a distinct amount.
double max_gradient_error(const std::vector<Tensor>& inputs, const Fn& fn, double h = 1e-5) {
  auto scalarize = [&](const std::vector<Tensor>& xs) {
    Tensor out = fn(xs);
    if (out.rank() == 0) return out;
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::vector<double> w(out.size());
    for (auto& x : w) x = u(rng);
    return sum(mul(out, Tensor(out.shape(), w)));
  };
  Tape tape;
  std::vector<Tensor> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.variable(x));
  GradientMap g = tape.backward(scalarize(leaves));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic = g.at(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto probe = [&](double delta) {
        std::vector<Tensor> xs = inputs;
        std::vector<double> v(inputs[k].values().begin(), inputs[k].values().end());
        v[i] += delta;
        xs[k] = Tensor(inputs[k].shape(), v);
        return scalarize(xs).item();
      };
      const double numeric = (probe(h) - probe(-h)) / (2 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), shape_error);
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, NonFiniteResultsAreErrors) {
  EXPECT_THROW(scale(Tensor::scalar(1e308), 10.0), numeric_error);
  EXPECT_THROW(add(Tensor::scalar(1.0), Tensor::scalar(std::nan(""))), numeric_error);
}

TEST(LogSoftmax, UniformRow) {
  Tensor out = log_softmax(Tensor::matrix(1, 3, {0, 0, 0}));
  for (double v : out.values()) EXPECT_NEAR(v, -std::log(3.0), 1e-15);
}

TEST(LogSoftmax, TwoLogitOracle) {
  Tensor out = log_softmax(Tensor::matrix(1, 2, {1, 0}));
  EXPECT_NEAR(out[0], -0.3132616875182228, 1e-15);
  EXPECT_NEAR(out[1], -1.3132616875182228, 1e-15);
}

TEST(LogSoftmax, ShiftInvariance) {
  Tensor out = log_softmax(Tensor::matrix(2, 2, {5, 5, 2, 2}));
  for (double v : out.values()) EXPECT_NEAR(v, -std::log(2.0), 1e-15);
}

TEST(LogSoftmax, RowsNormalizeForLargeLogits) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  std::vector<double> v(20 * 7);
  for (auto& x : v) x = u(rng);
  v[3] = 100.0;
  v[10] = -100.0;
  Tensor out = log_softmax(Tensor::matrix(20, 7, v));
  for (std::size_t r = 0; r < 20; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += std::exp(out.at(r, c));
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(LogSoftmax, EmptyIsShapeError) { EXPECT_THROW(log_softmax(Tensor::matrix(1, 0, {})), shape_error); }

TEST(GatherLogProb, SelectsEntries) {
  Tensor out = gather_log_prob(Tensor::matrix(1, 2, {-1, -2}), std::vector<std::uint32_t>{0});
  EXPECT_EQ(out[0], -1.0);
  std::vector<std::uint32_t> toks{1, 0};
  Tensor out2 = gather_log_prob(Tensor::matrix(2, 2, {-1, -2, -3, -4}), toks);
  EXPECT_EQ(out2[0], -2.0);
  EXPECT_EQ(out2[1], -3.0);
}

TEST(GatherLogProb, LastColumn) {
  Tensor lp = random_tensor({4, 5}, 1);
  std::vector<std::uint32_t> toks{4, 4, 4, 4};
  Tensor out = gather_log_prob(lp, toks);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(out[t], lp.at(t, 4));
}

TEST(GatherLogProb, OutOfRangeToken) {
  std::vector<std::uint32_t> toks{2};
  EXPECT_THROW(gather_log_prob(Tensor::matrix(1, 2, {-1, -2}), toks), index_error);
}

TEST(LogSigmoid, Values) {
  EXPECT_NEAR(log_sigmoid(Tensor::scalar(0)).item(), -std::log(2.0), 1e-16);
  const double big = log_sigmoid(Tensor::scalar(50)).item();
  EXPECT_LT(big, 0.0);
  EXPECT_NEAR(big / -1.928749847963918e-22, 1.0, 1e-12);
  EXPECT_NEAR(log_sigmoid(Tensor::scalar(-50)).item(), -50.0, 1e-15);
}

TEST(LogSigmoid, MonotoneAndNegative) {
  double prev = -1e300;
  for (double x = -40; x <= 40; x += 0.37) {
    const double v = log_sigmoid(Tensor::scalar(x)).item();
    EXPECT_LT(v, 0.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(StopGradient, ProductWithFrozenFactor) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(3.0));
  GradientMap g = tape.backward(mul(stop_gradient(x), x));
  EXPECT_EQ(g.at(x)[0], 3.0);
}

TEST(StopGradient, AloneGivesZero) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(3.0));
  Tensor y = tape.variable(Tensor::scalar(1.0));
  GradientMap g = tape.backward(add(stop_gradient(x), y));
  EXPECT_EQ(g.at(x)[0], 0.0);
  EXPECT_EQ(g.at(y)[0], 1.0);
}

TEST(StopGradient, PreservesValuesBitForBit) {
  Tensor x = random_tensor({3, 4}, 8, 1e3);
  Tensor y = stop_gradient(x);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(x[i]), std::bit_cast<std::uint64_t>(y[i]));
}

TEST(KlDivergence, OracleValue) {
  Tensor p = Tensor::matrix(1, 2, {std::log(3.0), 0.0});  // softmax -> [0.75, 0.25]
  Tensor q = Tensor::matrix(1, 2, {0.0, 0.0});
  EXPECT_NEAR(kl_divergence_rows(p, q)[0], 0.1308120359411369591, 1e-15);
}

TEST(KlDivergence, ZeroIffEqualRows) {
  Tensor p = random_tensor({5, 6}, 2);
  Tensor same = kl_divergence_rows(p, p);
  for (double v : same.values()) EXPECT_EQ(v, 0.0);
  std::vector<double> pv(p.values().begin(), p.values().end());
  pv[7] += 1e-3;
  Tensor q(p.shape(), pv);
  Tensor kl = kl_divergence_rows(p, q);
  EXPECT_GT(kl[1], 0.0);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_GE(kl[t], -1e-12);
}

TEST(KlDivergence, NonNegativeOnRandomRows) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Tensor kl = kl_divergence_rows(random_tensor({3, 4}, s, 3.0), random_tensor({3, 4}, s + 100, 3.0));
    for (double v : kl.values()) EXPECT_GE(v, -1e-12);
  }
}

TEST(KlDivergence, ShapeMismatch) {
  EXPECT_THROW(kl_divergence_rows(random_tensor({2, 3}, 1), random_tensor({2, 4}, 1)), shape_error);
}

TEST(Backward, SumOfSquares) {
  Tape tape;
  Tensor x = tape.variable(Tensor::vector({1, 2}));
  GradientMap g = tape.backward(sum(mul(x, x)));
  EXPECT_EQ(g.at(x), (std::vector<double>{2, 4}));
}

TEST(Backward, LogSigmoidAtZero) {
  Tape tape;
  Tensor w = tape.variable(Tensor::scalar(0.0));
  EXPECT_DOUBLE_EQ(tape.backward(log_sigmoid(w)).at(w)[0], 0.5);
}

TEST(Backward, RequiresScalarLoss) {
  Tape tape;
  Tensor x = tape.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(mul(x, x)), shape_error);
}

TEST(Backward, GradientShapesMatchValues) {
  Tape tape;
  Tensor a = tape.variable(random_tensor({3, 4}, 1));
  Tensor b = tape.variable(random_tensor({4, 2}, 2));
  Tensor unused = tape.variable(random_tensor({5}, 3));
  GradientMap g = tape.backward(sum(matmul(a, b)));
  EXPECT_EQ(g.at(a).size(), 12u);
  EXPECT_EQ(g.at(b).size(), 8u);
  EXPECT_EQ(g.at(unused), std::vector<double>(5, 0.0));
}

struct OpCase {
  const char* name;
  std::vector<Tensor> inputs;
  Fn fn;
};

class OpGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  const std::vector<std::uint32_t> toks{2, 0, 4};
  const std::vector<std::uint32_t> ids{1, 3, 1, 0};
  return {
      {"add", {random_tensor({2, 3}, 1), random_tensor({2, 3}, 2)}, [](auto& x) { return add(x[0], x[1]); }},
      {"sub", {random_tensor({2, 3}, 1), random_tensor({2, 3}, 2)}, [](auto& x) { return sub(x[0], x[1]); }},
      {"mul", {random_tensor({2, 3}, 1), random_tensor({2, 3}, 2)}, [](auto& x) { return mul(x[0], x[1]); }},
      {"scale", {random_tensor({4}, 1)}, [](auto& x) { return scale(x[0], -2.5); }},
      {"gelu", {random_tensor({7}, 3, 2.0)}, [](auto& x) { return gelu(x[0]); }},
      {"log_sigmoid", {random_tensor({6}, 4, 5.0)}, [](auto& x) { return log_sigmoid(x[0]); }},
      {"sum", {random_tensor({3, 2}, 5)}, [](auto& x) { return sum(x[0]); }},
      {"mean", {random_tensor({3, 2}, 5)}, [](auto& x) { return mean(x[0]); }},
      {"reshape", {random_tensor({3, 2}, 5)}, [](auto& x) { return reshape(x[0], {2, 3}); }},
      {"add_n", {random_tensor({2}, 1), random_tensor({2}, 2), random_tensor({2}, 3)},
       [](auto& x) { return add_n(x); }},
      {"matmul", {random_tensor({3, 4}, 1), random_tensor({4, 2}, 2)}, [](auto& x) { return matmul(x[0], x[1]); }},
      {"matmul_t", {random_tensor({3, 4}, 1), random_tensor({5, 4}, 2)},
       [](auto& x) { return matmul(x[0], x[1], true); }},
      {"add_bias", {random_tensor({3, 4}, 1), random_tensor({4}, 2)}, [](auto& x) { return add_bias(x[0], x[1]); }},
      {"slice_rows", {random_tensor({4, 3}, 1)}, [](auto& x) { return slice_rows(x[0], 1, 3); }},
      {"slice_cols", {random_tensor({4, 3}, 1)}, [](auto& x) { return slice_cols(x[0], 1, 3); }},
      {"row", {random_tensor({4, 3}, 1)}, [](auto& x) { return row(x[0], 2); }},
      {"concat_rows", {random_tensor({2, 3}, 1), random_tensor({1, 3}, 2)},
       [](auto& x) { return concat_rows(x); }},
      {"concat_cols", {random_tensor({2, 3}, 1), random_tensor({2, 1}, 2)},
       [](auto& x) { return concat_cols(x); }},
      {"embedding", {random_tensor({5, 3}, 1)}, [ids](auto& x) { return embedding(x[0], ids); }},
      {"layer_norm", {random_tensor({3, 5}, 1), random_tensor({5}, 2), random_tensor({5}, 3)},
       [](auto& x) { return layer_norm(x[0], x[1], x[2]); }},
      {"causal_softmax", {random_tensor({4, 4}, 1, 2.0)}, [](auto& x) { return causal_softmax(x[0]); }},
      {"log_softmax", {random_tensor({3, 5}, 1, 3.0)}, [](auto& x) { return log_softmax(x[0]); }},
      {"gather_log_prob", {random_tensor({3, 5}, 1, 3.0)},
       [toks](auto& x) { return gather_log_prob(log_softmax(x[0]), toks); }},
      {"kl_divergence_rows", {random_tensor({3, 5}, 1, 2.0), random_tensor({3, 5}, 2, 2.0)},
       [](auto& x) { return kl_divergence_rows(x[0], x[1]); }},
  };
}

TEST_P(OpGradient, MatchesCentralDifferences) {
  auto cases = op_cases();
  const auto& c = cases.at(static_cast<std::size_t>(GetParam()));
  EXPECT_LT(max_gradient_error(c.inputs, c.fn), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(CausalSoftmax, MasksFuture) {
  Tensor p = causal_softmax(random_tensor({4, 4}, 3));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      if (c > r) {
        EXPECT_EQ(p.at(r, c), 0.0);
      }
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Tape, IndependentTapesDoNotMix) {
  Tape t1, t2;
  Tensor a = t1.variable(Tensor::scalar(1.0));
  Tensor b = t2.variable(Tensor::scalar(2.0));
  EXPECT_THROW(add(a, b), std::invalid_argument);
}
