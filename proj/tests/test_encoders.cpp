// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "atd/encoders.hpp"

using namespace atd;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST(ConvOutDims, Examples) {
  EXPECT_EQ(conv_out_dims(32, 32, 3, 1, 1), (std::pair<std::size_t, std::size_t>{32, 32}));
  EXPECT_EQ(conv_out_dims(28, 28, 5, 1, 0), (std::pair<std::size_t, std::size_t>{24, 24}));
  EXPECT_EQ(conv_out_dims(7, 7, 3, 2, 0), (std::pair<std::size_t, std::size_t>{3, 3}));
}

TEST(ConvOutDims, KernelLargerThanPaddedInput) {
  EXPECT_THROW(conv_out_dims(2, 5, 5, 1, 1), InvalidGeometryError);
  EXPECT_THROW(conv_out_dims(4, 4, 3, 0, 0), InvalidGeometryError);
}

TEST(ConvOutDims, IndexBoundProperty) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t h1 = 1 + rng.below(30), f = 1 + rng.below(7), s = 1 + rng.below(4), p = rng.below(4);
    if (f > h1 + 2 * p) {
      EXPECT_THROW(conv_out_dims(h1, h1, f, s, p), InvalidGeometryError);
      continue;
    }
    const auto [h2, w2] = conv_out_dims(h1, h1, f, s, p);
    EXPECT_GE(h2, 1u);
    EXPECT_EQ(h2, w2);
    // Largest input row read, in padded coordinates shifted back by P.
    const long largest = static_cast<long>(s * (h2 - 1) + f - 1) - static_cast<long>(p);
    EXPECT_LT(largest, static_cast<long>(h1 + p));
  }
}

TEST(Conv2d, Examples) {
  Tape t;
  const auto one = conv2d(t.constant(Tensor({1, 1, 1}, {3})), t.constant(Tensor({1, 1, 1, 1}, {2})),
                          t.constant(Tensor({1}, {1})), 1, 0);
  EXPECT_EQ(one.value()[0], 7.0);

  const auto nine = conv2d(t.constant(Tensor::constant({1, 3, 3}, 1)), t.constant(Tensor::constant({1, 1, 3, 3}, 1)),
                           t.constant(Tensor::zeros({1})), 1, 0);
  EXPECT_EQ(nine.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(nine.value()[0], 9.0);

  Rng rng(3);
  const auto zero = conv2d(t.constant(Tensor::gaussian({2, 5, 5}, rng, 0, 1)), t.constant(Tensor::zeros({3, 2, 3, 3})),
                           t.constant(Tensor::zeros({3})), 2, 1);
  EXPECT_EQ(zero.shape(), (Shape{3, 3, 3}));
  for (double v : zero.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, PaddingReadsZero) {
  // 3×3 ones kernel over a 2×2 ones image with P=1: each output counts the
  // in-range cells of its window.
  Tape t;
  const auto y = conv2d(t.constant(Tensor::constant({1, 2, 2}, 1)), t.constant(Tensor::constant({1, 1, 3, 3}, 1)),
                        t.constant(Tensor::zeros({1})), 1, 1);
  for (double v : y.value().data()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, ChannelMismatch) {
  Tape t;
  EXPECT_THROW(conv2d(t.constant(Tensor::zeros({2, 4, 4})), t.constant(Tensor::zeros({1, 3, 3, 3})),
                      t.constant(Tensor::zeros({1})), 1, 1),
               ShapeError);
  ConvLayer layer = ConvLayer::zeros(ConvSpec::same(3, 2, 3));
  EXPECT_THROW(conv2d(t, t.constant(Tensor::zeros({1, 4, 4})), layer), ShapeError);
}

TEST(ResidualBlock, ZeroParamsIsIdentity) {
  Rng rng(4);
  auto block = ResidualBlockParams::zeros(3, 3);
  const Tensor x = Tensor::gaussian({3, 5, 5}, rng, 0, 2);
  Tape t;
  EXPECT_TRUE(bit_equal(residual_block(t, t.constant(x), block).value(), x));
}

TEST(ResidualBlock, ZeroInputWithZeroBiases) {
  Rng rng(5);
  auto block = ResidualBlockParams::init(2, 3, rng);
  Tape t;
  for (double v : residual_block(t, t.constant(Tensor::zeros({2, 4, 4})), block).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(ResidualBlock, DifferenceIsTheMapping) {
  Rng rng(6);
  auto block = ResidualBlockParams::init(2, 3, rng);
  for (auto& v : block.first.bias.data()) v = rng.uniform(-1, 1);
  for (auto& v : block.second.bias.data()) v = rng.uniform(-1, 1);
  const Tensor x = Tensor::gaussian({2, 5, 5}, rng, 0, 1);
  Tape t;
  const auto out = residual_block(t, t.constant(x), block).value();
  const auto fx = residual_mapping(t, t.constant(x), block).value();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out[i] - x[i], fx[i], 1e-12);
}

TEST(ResidualBlock, ShapeChangingParamsRejected) {
  ResidualBlockParams block{ConvLayer::zeros({3, 2, 1, 2, 2}), ConvLayer::zeros(ConvSpec::same(2, 2, 3))};
  Tape t;
  EXPECT_THROW(residual_block(t, t.constant(Tensor::zeros({2, 6, 6})), block), ContractError);
}

TEST(LstmStep, ZeroParamsFromZeroState) {
  auto p = LstmParams::zeros(3, 2);
  Tape t;
  const auto s = lstm_step(t, t.constant(Tensor::constant({2, 1}, 0.7)), lstm_zero_state(t, 3), p);
  for (double v : s.cell.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : s.hidden.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LstmStep, ZeroParamsClosedForm) {
  auto p = LstmParams::zeros(1, 1);
  Tape t;
  const auto s = lstm_step(t, t.constant(Tensor::zeros({1, 1})),
                           {t.constant(Tensor::zeros({1, 1})), t.constant(Tensor({1, 1}, {2.0}))}, p);
  EXPECT_DOUBLE_EQ(s.cell.value()[0], 1.0);
  EXPECT_NEAR(s.hidden.value()[0], 0.3807970779778824, 1e-12);

  // h = 0.5·tanh(0.5·C_prev) for arbitrary C_prev and inputs.
  Rng rng(8);
  auto q = LstmParams::zeros(4, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor c_prev = Tensor::gaussian({4, 1}, rng, 0, 3);
    const auto r = lstm_step(t, t.constant(Tensor::gaussian({3, 1}, rng, 0, 1)),
                             {t.constant(Tensor::gaussian({4, 1}, rng, 0, 1)), t.constant(c_prev)}, q);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.hidden.value()[i], 0.5 * std::tanh(0.5 * c_prev[i]), 1e-12);
  }
}

TEST(LstmStep, SaturatedGatesCarryTheCell) {
  Rng rng(9);
  auto p = LstmParams::init(3, 2, rng);
  for (Tensor* w : {&p.w_forget, &p.w_input}) *w = Tensor::zeros(w->shape());
  p.b_forget = Tensor::constant({3}, 20.0);
  p.b_input = Tensor::constant({3}, -20.0);
  const Tensor c_prev = Tensor({3, 1}, {0.7, -1.2, 2.5});
  Tape t;
  const auto s = lstm_step(t, t.constant(Tensor::gaussian({2, 1}, rng, 0, 1)),
                           {t.constant(Tensor::gaussian({3, 1}, rng, 0, 1)), t.constant(c_prev)}, p);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s.cell.value()[i], c_prev[i], 1e-3);
}

TEST(LstmStep, DimensionMismatch) {
  auto p = LstmParams::zeros(3, 2);
  Tape t;
  EXPECT_THROW(lstm_step(t, t.constant(Tensor::zeros({3, 1})), lstm_zero_state(t, 3), p), ShapeError);
  EXPECT_THROW(lstm_step(t, t.constant(Tensor::zeros({2, 1})), lstm_zero_state(t, 2), p), ShapeError);
}

TEST(EncodeSeries, ZeroParamsGiveProjectionBias) {
  SeriesEncoderParams p{LstmParams::zeros(3, 2), {Tensor::zeros({3, 4}), Tensor::vector({1, 2, 3, 4})}};
  Tape t;
  const auto f = encode_series(t, t.constant(Tensor::constant({1, 2}, 0.5)), p);
  EXPECT_EQ(f.modality, Modality::Numerical);
  EXPECT_EQ(f.rows.shape(), (Shape{1, 4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(f.rows.value()[i], static_cast<double>(i + 1));
}

TEST(EncodeSeries, IdentityProjectionExposesFinalHidden) {
  Rng rng(10);
  SeriesEncoderParams p{LstmParams::init(3, 2, rng), {Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}), Tensor::zeros({3})}};
  const Tensor seq = Tensor::gaussian({5, 2}, rng, 0, 1);
  Tape t;
  const auto f = encode_series(t, t.constant(seq), p);
  // Unrolled recurrence computed step by step.
  LstmState s = lstm_zero_state(t, 3);
  for (std::size_t i = 0; i < 5; ++i) {
    s = lstm_step(t, t.constant(Tensor({2, 1}, {seq.at(i, 0), seq.at(i, 1)})), s, p.lstm);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(f.rows.value()[i], s.hidden.value()[i]);
}

TEST(EncodeSeries, DifferentSeedsDiffer) {
  Rng r1(1), r2(2), data(3);
  auto p1 = SeriesEncoderParams::init(2, 4, 6, r1);
  auto p2 = SeriesEncoderParams::init(2, 4, 6, r2);
  const Tensor seq = Tensor::gaussian({4, 2}, data, 0, 1);
  Tape t;
  EXPECT_FALSE(bit_equal(encode_series(t, t.constant(seq), p1).rows.value(),
                         encode_series(t, t.constant(seq), p2).rows.value()));
}

TEST(EncodeSeries, EmptyOrMismatchedSequence) {
  Rng rng(1);
  auto p = SeriesEncoderParams::init(2, 3, 4, rng);
  Tape t;
  EXPECT_THROW(encode_series(t, t.constant(Tensor::zeros({4})), p), ContractError);
  EXPECT_THROW(encode_series(t, t.constant(Tensor::zeros({4, 3})), p), ShapeError);
}

TEST(EncodeImage, ZeroImageGivesProjectionBias) {
  Rng rng(11);
  auto p = ImageEncoderParams::init(1, 3, 3, 2, 5, rng);
  p.projection.bias = Tensor::vector({1, -1, 2, -2, 3});
  Tape t;
  const auto f = encode_image(t, t.constant(Tensor::zeros({1, 6, 6})), p);
  EXPECT_EQ(f.modality, Modality::Visual);
  const auto pooled = image_pooled_features(t, t.constant(Tensor::zeros({1, 6, 6})), p);
  for (double v : pooled.value().data()) EXPECT_EQ(v, 0.0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(f.rows.value()[i], p.projection.bias[i]);
}

TEST(EncodeImage, ZeroBlocksMatchBlockFreePipeline) {
  Rng rng(12);
  auto with_blocks = ImageEncoderParams::init(2, 3, 3, 2, 4, rng);
  for (auto& b : with_blocks.blocks) b = ResidualBlockParams::zeros(3, 3);
  auto without = with_blocks;
  without.blocks.clear();
  const Tensor img = Tensor::gaussian({2, 7, 7}, rng, 0, 1);
  Tape t;
  EXPECT_TRUE(bit_equal(encode_image(t, t.constant(img), with_blocks).rows.value(),
                        encode_image(t, t.constant(img), without).rows.value()));
}

TEST(EncodeImage, LinearStemScalesPooledFeatures) {
  Rng rng(13);
  auto p = ImageEncoderParams::init(1, 4, 3, 0, 4, rng);
  const Tensor img = Tensor::gaussian({1, 6, 6}, rng, 0, 1);
  Tensor doubled = img;
  for (auto& v : doubled.data()) v *= 2.0;
  Tape t;
  const ImageEncoderOptions linear_stem{false};
  const auto a = image_pooled_features(t, t.constant(img), p, linear_stem).value();
  const auto b = image_pooled_features(t, t.constant(doubled), p, linear_stem).value();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(b[i], 2.0 * a[i], 1e-12);
}

TEST(EncodeImage, InvalidGeometry) {
  Rng rng(14);
  auto p = ImageEncoderParams::init(1, 2, 5, 0, 4, rng);
  p.stem.spec.padding = 0;
  Tape t;
  EXPECT_THROW(encode_image(t, t.constant(Tensor::zeros({1, 3, 3})), p), InvalidGeometryError);
}

TEST(Encoders, FiniteOutputsForLargeInputs) {
  Rng rng(15);
  auto s = SeriesEncoderParams::init(2, 4, 4, rng);
  auto i = ImageEncoderParams::init(1, 3, 3, 2, 4, rng);
  Tape t;
  for (double v : encode_series(t, t.constant(Tensor::gaussian({6, 2}, rng, 0, 1e6)), s).rows.value().data())
    EXPECT_TRUE(std::isfinite(v));
  // Residual blocks are not saturating, but stay finite for finite input.
  for (double v : encode_image(t, t.constant(Tensor::gaussian({1, 6, 6}, rng, 0, 1e6)), i).rows.value().data())
    EXPECT_TRUE(std::isfinite(v));
}

TEST(Encoders, GradCheckAtSmallShapes) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    auto series = SeriesEncoderParams::init(2, 3, 4, rng);
    auto image = ImageEncoderParams::init(1, 2, 3, 2, 4, rng);
    Tensor seq = Tensor::gaussian({3, 2}, rng, 0, 1);
    Tensor img = Tensor::gaussian({1, 5, 5}, rng, 0, 1);
    const Tensor w = Tensor::gaussian({1, 4}, rng, 0, 1);

    std::vector<NamedParam> named;
    series.collect("s", named);
    std::vector<Tensor*> in{&seq};
    for (auto& p : named) in.push_back(p.tensor);
    EXPECT_LT(grad_check([&](Tape& t) { return sum(mul(t.constant(w), encode_series(t, t.variable(seq), series).rows)); },
                         in),
              1e-4);

    named.clear();
    image.collect("i", named);
    in = {&img};
    for (auto& p : named) in.push_back(p.tensor);
    EXPECT_LT(grad_check([&](Tape& t) { return sum(mul(t.constant(w), encode_image(t, t.variable(img), image).rows)); },
                         in),
              1e-4);
  }
}
