#include <gtest/gtest.h>

#include "rattn/attention.hpp"
#include "test_support.hpp"

namespace rattn {
namespace {

using test::bitwise_equal;
using test::random_tensor;

ExcitationParams<double> random_excitation(std::size_t channels, std::size_t extra, std::size_t r, std::uint64_t seed,
                                           double scale = 1.0) {
  auto p = ExcitationParams<double>::zeros(channels, extra, r);
  p.w1 = random_tensor<double>(p.w1.shape(), seed, -scale, scale);
  p.b1 = random_tensor<double>(p.b1.shape(), seed + 1, -scale, scale);
  p.w2 = random_tensor<double>(p.w2.shape(), seed + 2, -scale, scale);
  p.b2 = random_tensor<double>(p.b2.shape(), seed + 3, -scale, scale);
  return p;
}

TEST(ExcitationHidden, FloorsAndClampsToOne) {
  EXPECT_EQ(excitation_hidden(64, 8), 8u);
  EXPECT_EQ(excitation_hidden(100, 8), 12u);
  EXPECT_EQ(excitation_hidden(4, 16), 1u);
}

TEST(Squeeze, IsChannelMean) {
  Tensor<double> u({1, 2, 2, 2});
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = double(i);
  const auto z = squeeze(u);
  EXPECT_EQ(z.shape(), vec_shape(1, 2));
  EXPECT_DOUBLE_EQ(z[0], (0 + 2 + 4 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(z[1], (1 + 3 + 5 + 7) / 4.0);
}

TEST(Squeeze, IsLinear) {
  const auto u = random_tensor<double>({3, 5, 4, 6}, 1);
  const auto v = random_tensor<double>({3, 5, 4, 6}, 2);
  Tensor<double> mix(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) mix[i] = 2.5 * u[i] - 0.75 * v[i];
  const auto zu = squeeze(u), zv = squeeze(v), zm = squeeze(mix);
  for (std::size_t i = 0; i < zm.size(); ++i) EXPECT_NEAR(zm[i], 2.5 * zu[i] - 0.75 * zv[i], 1e-14);
}

TEST(Excite, WeightsStayInsideOpenUnitInterval) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // Kept below the range where sigmoid rounds to exactly 0 or 1 in double.
    const auto p = random_excitation(16, 5, 4, seed * 10, 0.5);
    const auto z = random_tensor<double>(vec_shape(4, 21), seed + 1000, -1.0, 1.0);
    const auto s = excite(z, p);
    for (double v : s.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Excite, RejectsWrongInputWidth) {
  const auto p = random_excitation(8, 3, 2, 5);
  EXPECT_THROW(excite(random_tensor<double>(vec_shape(2, 8), 1), p), InvalidInput);
}

TEST(Rescale, TouchesOnlyTheScaledChannel) {
  const auto u = random_tensor<double>({2, 3, 3, 5}, 3);
  auto s = random_tensor<double>(vec_shape(2, 5), 4, 0.1, 0.9);
  const auto y = rescale(u, s);
  s[1 * 5 + 2] = 0.123;  // sample 1, channel 2
  const auto y2 = rescale(u, s);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 3; ++w)
        for (std::size_t c = 0; c < 5; ++c) {
          if (n == 1 && c == 2) {
            EXPECT_DOUBLE_EQ(y2(n, h, w, c), 0.123 * u(n, h, w, c));
          } else {
            EXPECT_EQ(y2(n, h, w, c), y(n, h, w, c));
          }
        }
}

TEST(ConcatResult, PlacesResultFirst) {
  Tensor<double> t(vec_shape(2, 2), std::vector<double>{1, 2, 3, 4});
  Tensor<double> z(vec_shape(2, 3), std::vector<double>{5, 6, 7, 8, 9, 10});
  const auto out = concat_result(t, z);
  EXPECT_EQ(out.values(), (std::vector<double>{1, 2, 5, 6, 7, 3, 4, 8, 9, 10}));
  EXPECT_THROW(concat_result(Tensor<double>(vec_shape(3, 2)), z), InvalidInput);
}

TEST(SeR, EmptyResultIsBitwiseTheSeBlock) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(trial);
    const std::size_t c = 1 + rng.below(12), n = 1 + rng.below(4), side = 1 + rng.below(5);
    const auto p = random_excitation(c, 0, 1 + rng.below(4), trial * 7 + 1, 2.0);
    const auto u = random_tensor<double>({n, side, side, c}, trial * 7 + 5, -3.0, 3.0);
    EXPECT_TRUE(bitwise_equal(se_r_block_forward(u, Tensor<double>(), p), se_block_forward(u, p)));
  }
}

TEST(SeR, ZeroResultColumnsDecoupleTheResult) {
  const std::size_t c = 6, extra = 4;
  auto p = random_excitation(c, extra, 2, 77);
  for (std::size_t h = 0; h < p.hidden(); ++h)
    for (std::size_t j = 0; j < extra; ++j) p.w1[h * (extra + c) + j] = 0.0;
  const auto u = random_tensor<double>({3, 4, 4, c}, 78);
  const auto y1 = se_r_block_forward(u, random_tensor<double>(vec_shape(3, extra), 79, -10, 10), p);
  const auto y2 = se_r_block_forward(u, random_tensor<double>(vec_shape(3, extra), 80, -10, 10), p);
  EXPECT_TRUE(bitwise_equal(y1, y2));
}

TEST(SeR, NonzeroResultColumnsChangeTheOutput) {
  const auto p = random_excitation(6, 4, 2, 92);
  const auto u = random_tensor<double>({2, 3, 3, 6}, 92);
  const auto y1 = se_r_block_forward(u, random_tensor<double>(vec_shape(2, 4), 93), p);
  const auto y2 = se_r_block_forward(u, random_tensor<double>(vec_shape(2, 4), 94), p);
  EXPECT_GT(test::max_abs_diff(y1, y2), 1e-6);
}

TEST(ChannelAttentionUnit, MatchesStatelessForwardAndExposesWeights) {
  ChannelAttention<double> unit("a", 8, 3, 4);
  Rng rng(5);
  unit.init(rng);
  const auto u = random_tensor<double>({2, 3, 3, 8}, 6);
  const auto t = random_tensor<double>(vec_shape(2, 3), 7);
  const auto y = unit.forward(u, &t, Pass::eval());
  EXPECT_TRUE(bitwise_equal(y, se_r_block_forward(u, t, unit.params())));
  EXPECT_EQ(unit.weights().shape(), vec_shape(2, 8));
}

}  // namespace
}  // namespace rattn
