#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "property_checks.hpp"
#include "ulbq/saliency.hpp"

using namespace ulbq;
using namespace ulbq::testing;

namespace {

ToyTransformer<double> tiny_model(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.vocab = 11;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_ff = 32;
  cfg.context = 16;
  return ToyTransformer<double>::init(cfg, seed);
}

TokenBatch tiny_batch(std::uint64_t seed, std::size_t n = 4, std::size_t seq = 12) {
  std::mt19937_64 rng(seed);
  std::vector<int> tokens(400);
  for (auto& t : tokens) t = static_cast<int>(rng() % 11);
  return sample_calibration(tokens, n, seq, seed);
}

}  // namespace

TEST(SquaredGradients, SingleSampleExample) {
  Td w = Td::zeros({3}, true);
  const Td g({3}, (Array<double>(3) << 1, -2, 3).finished());
  const std::vector<Td> params{w};
  auto raw = mean_squared_gradients<double>(params, 1, [&](std::size_t) { return sum(mul(w, g)); });
  EXPECT_EQ(raw[0][0], 1.0);
  EXPECT_EQ(raw[0][1], 4.0);
  EXPECT_EQ(raw[0][2], 9.0);
  normalize_mean_one(raw[0]);
  EXPECT_NEAR(raw[0][0], 3.0 / 14.0, 1e-15);
  EXPECT_NEAR(raw[0][1], 12.0 / 14.0, 1e-15);
  EXPECT_NEAR(raw[0][2], 27.0 / 14.0, 1e-15);
  EXPECT_NEAR(raw[0][0], 0.214, 5e-4);
  EXPECT_NEAR(raw[0][1], 0.857, 5e-4);
  EXPECT_NEAR(raw[0][2], 1.929, 5e-4);
}

TEST(SquaredGradients, DeadPathIsZero) {
  Td w = Td::full({4}, 0.3, true);
  const Td mask({4}, (Array<double>(4) << 1, 0, 2, 0).finished());
  const std::vector<Td> params{w};
  auto raw = mean_squared_gradients<double>(params, 3, [&](std::size_t) { return sum(square(mul(w, mask))); });
  EXPECT_EQ(raw[0][1], 0.0);
  EXPECT_EQ(raw[0][3], 0.0);
  EXPECT_GT(raw[0][0], 0.0);
}

TEST(SquaredGradients, OneParameterAnalyticOracle) {
  const double w0 = 0.7;
  const std::vector<double> xs{0.5, -1.2, 2.0, 0.3}, ys{1.0, 0.4, -0.6, 2.2};
  Td w = Td::scalar(w0, true);
  const std::vector<Td> params{w};
  auto raw = mean_squared_gradients<double>(params, xs.size(), [&](std::size_t i) {
    return square(add_scalar(scale(w, xs[i]), -ys[i]));
  });
  double expect = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) expect += std::pow(2 * xs[i] * (w0 * xs[i] - ys[i]), 2);
  expect /= static_cast<double>(xs.size());
  EXPECT_NEAR(raw[0][0], expect, 1e-13 * expect);
}

TEST(SquaredGradients, NonFiniteSamplesDroppedAndCounted) {
  Td w = Td::scalar(1.0, true);
  const std::vector<Td> params{w};
  std::size_t dropped = 0;
  auto raw = mean_squared_gradients<double>(
      params, 4,
      [&](std::size_t i) { return i == 1 ? log(scale(w, 0.0)) : scale(w, 2.0); }, &dropped);
  EXPECT_EQ(dropped, 1u);
  EXPECT_EQ(raw[0][0], 4.0);
}

TEST(SquaredGradients, AllDroppedIsHardError) {
  Td w = Td::scalar(1.0, true);
  const std::vector<Td> params{w};
  EXPECT_THROW(mean_squared_gradients<double>(params, 3, [&](std::size_t) { return log(scale(w, 0.0)); }),
               SaliencyError);
}

TEST(Saliency, MapCoversEveryLinearWithMeanOne) {
  const auto model = tiny_model(1);
  const auto batch = tiny_batch(2);
  const auto s = compute_saliency(model, batch, "toy");
  EXPECT_EQ(s.alpha.size(), model.blocks.size() * kLinearsPerBlock);
  for (std::size_t b = 0; b < model.blocks.size(); ++b)
    for (std::size_t l = 0; l < kLinearsPerBlock; ++l) {
      const auto& a = s.at(linear_name(b, l));
      EXPECT_EQ(a.shape(), model.blocks[b].linear[l].shape());
      EXPECT_TRUE((a.value() >= 0).all());
      EXPECT_NEAR(a.value().mean(), 1.0, 1e-12);
    }
  EXPECT_EQ(s.meta.dataset, "toy");
  EXPECT_EQ(s.meta.samples, batch.n);
  EXPECT_EQ(s.meta.dropped, 0u);
  EXPECT_EQ(s.meta.seq_len, batch.seq_len);
  EXPECT_THROW(s.at("blocks.9.q"), std::out_of_range);
}

TEST(Saliency, DoesNotTouchModelGradients) {
  const auto model = tiny_model(3);
  (void)compute_saliency(model, tiny_batch(4));
  for (const auto& p : model.parameters()) EXPECT_FALSE(p.has_grad());
}

TEST(Saliency, InvariantToLossScale) {
  const auto c = saliency_scale_invariance(tiny_model(5), tiny_batch(6));
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Saliency, RawScalesWithSquareOfLossFactor) {
  Td w = Td::full({2}, 0.5, true);
  const std::vector<Td> params{w};
  auto loss = [&](double c) {
    return mean_squared_gradients<double>(params, 1, [&](std::size_t) { return scale(sum(square(w)), c); })[0];
  };
  const auto r1 = loss(1.0), r3 = loss(3.0);
  EXPECT_NEAR(r3[0], 9 * r1[0], 1e-15);
  EXPECT_NEAR(r3[1], 9 * r1[1], 1e-15);
}

TEST(Saliency, EmptyBatchRejected) {
  EXPECT_THROW(compute_saliency(tiny_model(7), TokenBatch{}), std::invalid_argument);
}

TEST(Regularizer, WorkedExample) {
  const Td w({2}, (Array<double>(2) << 1.0, 2.0).finished());
  const Td t({2}, (Array<double>(2) << 0.9, 1.9).finished());
  const Td a({2}, (Array<double>(2) << 1.0, 4.0).finished());
  EXPECT_NEAR(saliency_regularizer(w, t, a).item(), 0.05, 1e-15);
}

TEST(Regularizer, IdenticalTargetIsZero) {
  std::mt19937_64 rng(8);
  const Td w = randn(rng, {5, 7});
  EXPECT_EQ(saliency_regularizer(w, w, uniform(rng, {5, 7}, 0.0, 3.0)).item(), 0.0);
}

TEST(Regularizer, MatchesDenseOracle) {
  std::mt19937_64 rng(9);
  const auto c = regularizer_oracle(rng);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Regularizer, NonnegativeAndZeroOnlyOnSupport) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 100; ++t) {
    const Td w = randn(rng, {4, 4}), tg = randn(rng, {4, 4});
    Array<double> a = uniform(rng, {4, 4}, 0.0, 1.0).value();
    EXPECT_GE(saliency_regularizer(w, tg, Td({4, 4}, a)).item(), 0.0);
    // A target that differs only where alpha is zero costs nothing.
    Array<double> moved = w.value();
    a[3] = 0;
    moved[3] += 1.0;
    EXPECT_EQ(saliency_regularizer(w, Td({4, 4}, moved), Td({4, 4}, a)).item(), 0.0);
  }
}

TEST(Regularizer, GradientFlowsThroughTarget) {
  std::mt19937_64 rng(11);
  const Td w = randn(rng, {3, 3});
  Td tg = randn(rng, {3, 3}, 1.0, true);
  const Td a = uniform(rng, {3, 3}, 0.1, 2.0);
  backward(saliency_regularizer(w, tg, a));
  const Array<double> expect = -2.0 * a.value() * (w.value() - tg.value());
  EXPECT_LT((tg.grad() - expect).abs().maxCoeff(), 1e-14);
}

TEST(Regularizer, ShapeMismatchRejected) {
  EXPECT_THROW(saliency_regularizer(Td::zeros({2, 2}), Td::zeros({2, 3}), Td::zeros({2, 2})), ShapeError);
  EXPECT_THROW(saliency_regularizer(Td::zeros({2, 2}), Td::zeros({2, 2}), Td::zeros({4})), ShapeError);
}
