#include <gtest/gtest.h>

#include "property_checks.hpp"
#include "ulbq/optim.hpp"
#include "ulbq/qlinear.hpp"

using namespace ulbq;
using namespace ulbq::testing;

namespace {

std::vector<double> vec(std::initializer_list<double> v) { return v; }

}  // namespace

TEST(Rtn, ScaleExamples) {
  EXPECT_DOUBLE_EQ(compute_scale<double>(vec({0, 1}), 2), 1.0 / 3);
  EXPECT_DOUBLE_EQ(compute_scale<double>(vec({0.7, 0.7, 0.7}), 2), 1e-8);
  EXPECT_DOUBLE_EQ(compute_scale<double>(vec({-1, 3}), 3), 4.0 / 7);
  EXPECT_THROW(compute_scale<double>(std::span<const double>{}, 2), std::invalid_argument);
}

TEST(Rtn, ZeroPointExamples) {
  EXPECT_EQ(compute_zero_point(0.0, 0.25), 0.0);
  EXPECT_EQ(compute_zero_point(-1.0, 0.5), 2.0);
  EXPECT_EQ(compute_zero_point(-0.75, 0.5), 2.0);  // exact tie, away from zero
  // 0.3 / 0.2 is a tie only in decimal: binary32 lands above 1.5, binary64 below.
  EXPECT_EQ(compute_zero_point(0.3f, 0.2f), -2.0f);
  EXPECT_EQ(compute_zero_point(0.3, 0.2), -1.0);
}

TEST(Rtn, QuantizeExamples) {
  const GroupLayout layout(1, 2, 0);
  const GroupParams<double> p{Array<double>::Constant(1, 1.0 / 3), Array<double>::Zero(1)};
  Matrix<double> w(1, 2);
  w << 0.4, 10.0;
  const CodeMatrix q = quantize_rtn(w, layout, p, 2);
  EXPECT_EQ(q(0, 0), 1);
  EXPECT_EQ(q(0, 1), 3);
  const Matrix<double> d = dequantize(q, layout, p);
  EXPECT_DOUBLE_EQ(d(0, 0), 1.0 / 3);
}

TEST(Rtn, ZeroCodeDequantizesToZero) {
  const GroupLayout layout(1, 1, 0);
  const GroupParams<double> p{Array<double>::Constant(1, 0.37), Array<double>::Constant(1, 2.0)};
  CodeMatrix q(1, 1);
  q(0, 0) = 2;
  EXPECT_EQ(dequantize(q, layout, p)(0, 0), 0.0);
}

TEST(Rtn, ConstantGroupReconstructsExactly) {
  Matrix<double> w = Matrix<double>::Constant(2, 4, 0.0375);
  const GroupLayout layout(2, 4, 0);
  const Matrix<double> r = fake_quant_rtn(w, layout, 2);
  EXPECT_NEAR((r - w).cwiseAbs().maxCoeff(), 0.0, 1e-8);
}

TEST(Rtn, EightBitPerMatrixBound) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const Matrix<double> w = randn_matrix(rng, 16, 32);
    const GroupLayout layout(16, 32, 0);
    const auto p = rtn_params(w, layout, 8);
    const Matrix<double> r = dequantize(quantize_rtn(w, layout, p, 8), layout, p);
    EXPECT_LE((w - r).cwiseAbs().maxCoeff(), p.scale[0] / 2 * (1 + 1e-9));
  }
}

TEST(Rtn, GroupsAreContiguousAlongRows) {
  const GroupLayout layout(2, 8, 4);
  EXPECT_EQ(layout.num_groups(), 4u);
  EXPECT_EQ(layout.group_of(0, 3), 0u);
  EXPECT_EQ(layout.group_of(0, 4), 1u);
  EXPECT_EQ(layout.group_of(1, 0), 2u);
  EXPECT_THROW(GroupLayout(2, 6, 4), std::invalid_argument);
}

TEST(Rtn, ReconstructionBoundProperty) {
  std::mt19937_64 rng(11);
  const auto c = reconstruction_bound(rng);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Rtn, MonotoneFidelityProperty) {
  std::mt19937_64 rng(12);
  const auto c = monotone_mse(rng);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(QuantSpec, Validation) {
  EXPECT_THROW((QuantSpec{5, 0, QuantizerKind::rtn}.validate()), std::invalid_argument);
  EXPECT_THROW((QuantSpec{3, 0, QuantizerKind::dual_binary}.validate()), std::invalid_argument);
  EXPECT_THROW((QuantSpec{2, 0, QuantizerKind::mos}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((QuantSpec{1, 0, QuantizerKind::mos}.validate()));
  EXPECT_EQ(parse_quantizer_kind("learnable_clip"), QuantizerKind::learnable_clip);
  EXPECT_THROW(parse_quantizer_kind("gptq"), std::invalid_argument);
}

TEST(LearnableClip, GateOpenMatchesRtn) {
  std::mt19937_64 rng(13);
  const auto c = gate_open(rng);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(LearnableClip, NearlyOpenGateAtEightBits) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 20; ++t) {
    const Td w = randn(rng, {32, 64}, 0.02);
    const GroupLayout layout(32, 64, 0);
    const Td g = Td::full({1}, 4.0);
    const double learn = (w.to_matrix() - fake_quant_learnable(w, g, g, layout, 8).to_matrix()).squaredNorm() / 2048;
    const double rtn = (w.to_matrix() - fake_quant_rtn(w.to_matrix(), layout, 8)).squaredNorm() / 2048;
    EXPECT_LE(learn, rtn + 1e-6);
  }
}

TEST(LearnableClip, AdamStepMovesGatesWhenClampActive) {
  std::mt19937_64 rng(15);
  const Td w = randn(rng, {8, 16});
  const GroupLayout layout(8, 16, 8);
  Td lo = Td::full({layout.num_groups()}, 0.0, true);  // gate 0.5: clamp active
  Td hi = Td::full({layout.num_groups()}, 0.0, true);
  AdamW<double> opt({{{lo, hi}, 0.005, 0.1}});
  backward(sum(square(sub(w, fake_quant_learnable(w, lo, hi, layout, 2)))));
  ASSERT_TRUE(lo.has_grad());
  EXPECT_GT(lo.grad().abs().maxCoeff(), 0.0);
  EXPECT_GT(hi.grad().abs().maxCoeff(), 0.0);
  opt.step();
  EXPECT_GT((lo.value() - 0.0).abs().maxCoeff(), 0.0);
  EXPECT_GT((hi.value() - 0.0).abs().maxCoeff(), 0.0);
}

TEST(LearnableClip, CodesMatchForwardPass) {
  std::mt19937_64 rng(16);
  const Td w = randn(rng, {6, 8});
  const GroupLayout layout(6, 8, 4);
  const Td lo = uniform(rng, {layout.num_groups()}, -1, 4), hi = uniform(rng, {layout.num_groups()}, -1, 4);
  const auto p = learnable_clip_params(w, lo, hi, layout, 3);
  const CodeMatrix codes = learnable_clip_codes(w.to_matrix(), p, layout, 3);
  const GroupParams<double> gp{p.scale.value(), p.zero.value()};
  const Matrix<double> a = dequantize(codes, layout, gp);
  const Matrix<double> b = fake_quant_learnable(w, lo, hi, layout, 3).to_matrix();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * 48), 0);
}

TEST(LearnableClip, CollapsedRangeIsReported) {
  const Td w = Td::full({2, 4}, 0.5);
  const GroupLayout layout(2, 4, 0);
  const Td g = Td::full({1}, 4.0);
  FakeQuantStats stats;
  const Td r = fake_quant_learnable(w, g, g, layout, 2, &stats);
  EXPECT_EQ(stats.degenerate_groups, 1u);
  EXPECT_TRUE(r.value().isFinite().all());
}

TEST(DualBinary, ExactFourLevelGroup) {
  const auto r = dual_binarize<double>(vec({-1.5, -0.5, 0.5, 1.5}));
  EXPECT_NEAR(r.mse, 0.0, 1e-24);
  const double big = std::max(std::abs(r.alpha1), std::abs(r.alpha2));
  const double small = std::min(std::abs(r.alpha1), std::abs(r.alpha2));
  EXPECT_NEAR(big, 1.0, 1e-12);
  EXPECT_NEAR(small, 0.5, 1e-12);
}

TEST(DualBinary, ConstantGroup) {
  const auto r = dual_binarize<double>(vec({0.8, 0.8}));
  EXPECT_NEAR(r.mse, 0.0, 1e-24);
  EXPECT_NEAR(r.reconstruction[0], 0.8, 1e-12);
  EXPECT_NEAR(r.reconstruction[1], 0.8, 1e-12);
}

TEST(DualBinary, ClosedFormScalesBeatGrid) {
  // For fixed sign planes no (alpha1, alpha2) on a fine grid around the
  // closed-form solution does better.
  std::mt19937_64 rng(17);
  for (int t = 0; t < 50; ++t) {
    const Td w = randn(rng, {12});
    std::vector<std::int8_t> b1(12), b2(12);
    for (int i = 0; i < 12; ++i) {
      b1[i] = rng() % 2 ? 1 : -1;
      b2[i] = rng() % 2 ? 1 : -1;
    }
    if (b1 == b2) b2[0] = static_cast<std::int8_t>(-b2[0]);
    const std::span<const double> ws(w.value().data(), 12);
    const auto [a1, a2] = detail::dual_alphas(ws, b1, b2);
    const double best = detail::dual_mse(ws, a1, a2, b1, b2);
    for (int i = -20; i <= 20; ++i)
      for (int j = -20; j <= 20; ++j) {
        const double m = detail::dual_mse(ws, a1 + 0.01 * i, a2 + 0.01 * j, b1, b2);
        EXPECT_GE(m, best - 1e-15);
      }
  }
}

TEST(DualBinary, GridAndRtnOracles) {
  std::mt19937_64 rng(18);
  const auto c = dual_binary_oracle(rng, 200);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Mos, SingleExpertIgnoresRouter) {
  std::mt19937_64 rng(19);
  const Td x = randn(rng, {5, 6});
  const Td e = randn(rng, {1, 3});
  const Td s = mos_scale(x, e, randn(rng, {1, 6}, 5.0));
  for (Eigen::Index t = 0; t < 5; ++t)
    for (Eigen::Index j = 0; j < 3; ++j) EXPECT_EQ(s.matrix()(t, j), e.value()[j]);
}

TEST(Mos, EqualLogitsAverageExperts) {
  std::mt19937_64 rng(20);
  const Td x = randn(rng, {4, 6});
  const Td e = randn(rng, {2, 3});
  const Td s = mos_scale(x, e, Td::zeros({2, 6}));
  for (Eigen::Index t = 0; t < 4; ++t)
    for (Eigen::Index j = 0; j < 3; ++j)
      EXPECT_NEAR(s.matrix()(t, j), 0.5 * (e.matrix()(0, j) + e.matrix()(1, j)), 1e-15);
}

TEST(Mos, GatesSumToOne) {
  std::mt19937_64 rng(21);
  const auto c = mos_contract(rng);
  EXPECT_TRUE(c.pass) << c.detail;
}

TEST(QuantizedLinear, KindsProduceFiniteForward) {
  std::mt19937_64 rng(22);
  const Td w = randn(rng, {8, 16}, 0.05);
  const Td x = randn(rng, {3, 16});
  for (const auto& spec : {QuantSpec{2, 0, QuantizerKind::rtn}, QuantSpec{2, 8, QuantizerKind::learnable_clip},
                           QuantSpec{2, 8, QuantizerKind::dual_binary}, QuantSpec{1, 0, QuantizerKind::mos}}) {
    QuantizedLinear<double> q(w, spec, 2);
    const Td y = q.forward(x);
    EXPECT_EQ(y.shape(), (Shape{3, 8}));
    EXPECT_TRUE(y.value().isFinite().all()) << to_string(spec.kind);
    const auto d = q.deploy();
    EXPECT_LT((d.forward(x).value() - y.value()).abs().maxCoeff(), 1e-12) << to_string(spec.kind);
  }
}

TEST(QuantizedLinear, DisabledQuantizerIsIdentity) {
  std::mt19937_64 rng(23);
  const Td w = randn(rng, {4, 6});
  const QuantizedLinear<double> q(w, QuantSpec{2, 0, QuantizerKind::learnable_clip}, 0, false);
  EXPECT_EQ(std::memcmp(q.quantized_weight().value().data(), w.value().data(), sizeof(double) * 24), 0);
  EXPECT_TRUE(q.quant_parameters().empty());
}
