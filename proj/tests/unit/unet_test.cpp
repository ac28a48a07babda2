#include <gtest/gtest.h>

#include <cmath>

#include "modelmix/unet.hpp"

using namespace modelmix;

namespace {

UNetConfig small_config(int classes = 3, double dropout = 0.0) {
  UNetConfig c;
  c.depth = 3;
  c.base_channels = 4;
  c.num_classes = classes;
  c.dropout_rate = dropout;
  return c;
}

Tensor4<float> random_images(std::size_t n, std::size_t hw, SeededRng& rng) {
  Tensor4<float> x(Shape4{n, 1, hw, hw});
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  return x;
}

}  // namespace

TEST(UNet, OutputIsAPerPixelDistribution) {
  SeededRng rng(1);
  const SegModel<float> m(small_config(), "t", rng);
  const Tensor4<float> p = m.predict(random_images(2, 16, rng));
  ASSERT_EQ(p.shape(), (Shape4{2, 3, 16, 16}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          EXPECT_GE(p(n, c, y, x), 0.0f);
          s += p(n, c, y, x);
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
}

TEST(UNet, ParameterCountByHand) {
  UNetConfig c;
  c.num_classes = 3;  // depth 3, base 8
  // Encoder 1->8->8, 8->16->16, 16->32->32; decoder 48->16->16, 24->8->8; head 8->3.
  const std::size_t enc = (9 * 1 * 8 + 8) + (9 * 8 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 16 + 16) +
                          (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32);
  const std::size_t dec = (9 * 48 * 16 + 16) + (9 * 16 * 16 + 16) + (9 * 24 * 8 + 8) + (9 * 8 * 8 + 8);
  const std::size_t head = 8 * 3 + 3;
  EXPECT_EQ(c.parameter_count(), enc + dec + head);
  SeededRng rng(2);
  const SegModel<float> m(c, "t", rng);
  EXPECT_EQ(m.parameter_count(), enc + dec + head);
  std::size_t total = 0;
  for (const auto& [name, v] : m.named_parameters()) total += v.value().numel();
  EXPECT_EQ(total, enc + dec + head);
}

TEST(UNet, HeUniformInitStatistics) {
  UNetConfig c;
  c.base_channels = 16;
  SeededRng rng(3);
  const SegModel<float> m(c, "t", rng);
  // Deepest encoder conv: 64 -> 64 channels, fan_in 576.
  const ConvParams<float> p = m.get_conv(LayerAddress{2, 1});
  const double fan_in = 64.0 * 9.0, bound = std::sqrt(6.0 / fan_in);
  double sq = 0.0;
  for (float v : p.kernel.data()) {
    EXPECT_LE(std::abs(v), bound);
    sq += static_cast<double>(v) * v;
  }
  const double var = sq / static_cast<double>(p.kernel.numel());
  EXPECT_NEAR(var, 2.0 / fan_in, 0.05 * 2.0 / fan_in);
  SeededRng other(4);
  const SegModel<float> m2(c, "t", other);
  EXPECT_NE(m2.get_conv(LayerAddress{2, 1}), p);
}

TEST(UNet, DropoutOnlyInTraining) {
  SeededRng rng(5);
  const SegModel<float> m(small_config(2, 0.5), "t", rng);
  const Tensor4<float> x = random_images(2, 16, rng);
  SeededRng d1(9), d2(9), d3(10);
  const Tensor4<float> a = m.forward(Var<float>::leaf(x), true, d1).value();
  const Tensor4<float> b = m.forward(Var<float>::leaf(x), true, d2).value();
  const Tensor4<float> c = m.forward(Var<float>::leaf(x), true, d3).value();
  EXPECT_EQ(a, b);
  EXPECT_GT(max_abs_diff(a, c), 1e-4);
  SeededRng d4(11);
  EXPECT_EQ(m.forward(Var<float>::leaf(x), false, d4).value(), m.predict(x));
}

TEST(UNet, ConfigValidation) {
  auto bad = [](auto mutate) {
    UNetConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](UNetConfig& c) { c.depth = 1; }).validate(), ContractViolation);
  EXPECT_THROW(bad([](UNetConfig& c) { c.base_channels = 3; }).validate(), ContractViolation);
  EXPECT_THROW(bad([](UNetConfig& c) { c.num_classes = 1; }).validate(), ContractViolation);
  EXPECT_THROW(bad([](UNetConfig& c) { c.dropout_rate = 1.0; }).validate(), ContractViolation);
  EXPECT_THROW(bad([](UNetConfig& c) { c.in_channels = 0; }).validate(), ContractViolation);
  SeededRng rng(6);
  const SegModel<float> m(small_config(), "t", rng);
  EXPECT_EQ(small_config().input_divisor(), 4u);
  EXPECT_THROW(m.predict(Tensor4<float>(Shape4{1, 1, 18, 16})), ContractViolation);
  EXPECT_THROW(m.predict(Tensor4<float>(Shape4{1, 2, 16, 16})), ContractViolation);
}

TEST(UNet, EncoderLayersEnumerateInOrder) {
  SeededRng rng(7);
  const SegModel<float> m(small_config(), "t", rng);
  const auto layers = m.enumerate_encoder_layers();
  ASSERT_EQ(layers.size(), 6u);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    EXPECT_EQ(layers[i].stage, static_cast<int>(i / 2));
    EXPECT_EQ(layers[i].conv_index, static_cast<int>(i % 2));
  }
  EXPECT_EQ(layers[3].str(), "encoder.1.1");
  EXPECT_THROW(m.get_conv(LayerAddress{3, 0}), ContractViolation);
  EXPECT_THROW(m.get_conv(LayerAddress{0, 2}), ContractViolation);
}

TEST(UNet, SetConvAndCloneIndependence) {
  SeededRng rng(8);
  SegModel<float> m(small_config(), "t", rng);
  SegModel<float> copy = m.clone();
  ConvParams<float> p = m.get_conv(LayerAddress{1, 0});
  for (float& v : p.kernel.data()) v += 1.0f;
  m.set_conv(LayerAddress{1, 0}, p);
  EXPECT_EQ(m.get_conv(LayerAddress{1, 0}), p);
  EXPECT_NE(copy.get_conv(LayerAddress{1, 0}), p);
  p.bias.pop_back();
  EXPECT_THROW(m.set_conv(LayerAddress{1, 0}, p), ContractViolation);
}

TEST(UNet, SharedEncoderAliasesStorage) {
  SeededRng rng(9);
  SegModel<float> a(small_config(3), "a", rng);
  SegModel<float> b(small_config(2), "b", rng);
  b.share_encoder_with(a);
  EXPECT_EQ(a.get_conv(LayerAddress{0, 0}), b.get_conv(LayerAddress{0, 0}));
  ConvParams<float> p = a.get_conv(LayerAddress{2, 1});
  p.kernel[0] = 42.0f;
  a.set_conv(LayerAddress{2, 1}, p);
  EXPECT_EQ(b.get_conv(LayerAddress{2, 1}).kernel[0], 42.0f);
}
