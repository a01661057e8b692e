#include <gtest/gtest.h>

#include "test_util.hpp"
#include "websod/feature_map.hpp"
#include "websod/layers.hpp"

using namespace websod;
using websod::testing::random_tensor;

namespace {

Tensor naive_conv(const nn::ConvLayer& l, const Tensor& in) {
  const int h = in.dim(1), w = in.dim(2), oh = l.output_size(h), ow = l.output_size(w);
  Tensor out({l.out_channels, oh, ow});
  for (int o = 0; o < l.out_channels; ++o)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = l.bias[static_cast<std::size_t>(o)];
        for (int c = 0; c < l.in_channels; ++c)
          for (int ky = 0; ky < l.kernel; ++ky)
            for (int kx = 0; kx < l.kernel; ++kx) {
              const int iy = y * l.stride - l.pad + ky, ix = x * l.stride - l.pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += l.weight[static_cast<std::size_t>(o * l.in_channels * l.kernel * l.kernel +
                                                     (c * l.kernel + ky) * l.kernel + kx)] *
                   in.at(c, iy, ix);
            }
        out.at(o, y, x) = s;
      }
  return out;
}

nn::ConvLayer random_conv(int in, int out, int k, int s, int p, std::mt19937_64& rng) {
  nn::ConvLayer l(in, out, k, s, p);
  l.weight = random_tensor(l.weight.shape, rng);
  l.bias = random_tensor(l.bias.shape, rng);
  return l;
}

}  // namespace

TEST(Conv, ForwardMatchesNaiveLoops) {
  std::mt19937_64 rng(1);
  for (auto [k, s, p] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}, std::tuple{3, 2, 0}}) {
    const auto l = random_conv(3, 4, k, s, p, rng);
    const auto in = random_tensor({3, 7, 6}, rng);
    const auto got = nn::conv_forward(l, in, nullptr);
    const auto want = naive_conv(l, in);
    ASSERT_EQ(got.shape, want.shape);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  auto l = random_conv(2, 3, 3, 2, 1, rng);
  auto in = random_tensor({2, 5, 5}, rng);
  const auto probe = random_tensor({3, 3, 3}, rng);
  auto loss = [&] {
    const auto o = nn::conv_forward(l, in, nullptr);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * probe[i];
    return s;
  };
  nn::ConvCache cache;
  nn::conv_forward(l, in, &cache);
  nn::ConvLayer grads(2, 3, 3, 2, 1);
  const auto gin = nn::conv_backward(l, cache, probe, &grads, true);
  for (std::size_t i = 0; i < in.size(); ++i)
    EXPECT_TRUE(websod::testing::grad_close(gin[i], websod::testing::central_difference(loss, in.data[i])));
  for (std::size_t i = 0; i < l.weight.size(); ++i)
    EXPECT_TRUE(websod::testing::grad_close(grads.weight[i], websod::testing::central_difference(loss, l.weight.data[i])));
  for (std::size_t i = 0; i < l.bias.size(); ++i)
    EXPECT_TRUE(websod::testing::grad_close(grads.bias[i], websod::testing::central_difference(loss, l.bias.data[i])));
}

TEST(Linear, ForwardAndBackward) {
  std::mt19937_64 rng(3);
  nn::LinearLayer l(4, 3);
  l.weight = random_tensor({3, 4}, rng);
  l.bias = random_tensor({3}, rng);
  auto in = random_tensor({2, 4}, rng);
  const auto out = nn::linear_forward(l, in);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 3; ++o) {
      double s = l.bias[static_cast<std::size_t>(o)];
      for (int i = 0; i < 4; ++i) s += l.weight[static_cast<std::size_t>(o * 4 + i)] * in[static_cast<std::size_t>(n * 4 + i)];
      EXPECT_NEAR(out[static_cast<std::size_t>(n * 3 + o)], s, 1e-12);
    }
  const auto probe = random_tensor({2, 3}, rng);
  auto loss = [&] {
    const auto o = nn::linear_forward(l, in);
    double s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * probe[i];
    return s;
  };
  nn::LinearLayer grads(4, 3);
  const auto gin = nn::linear_backward(l, in, probe, &grads, true);
  for (std::size_t i = 0; i < in.size(); ++i)
    EXPECT_TRUE(websod::testing::grad_close(gin[i], websod::testing::central_difference(loss, in.data[i])));
  for (std::size_t i = 0; i < l.weight.size(); ++i)
    EXPECT_TRUE(websod::testing::grad_close(grads.weight[i], websod::testing::central_difference(loss, l.weight.data[i])));
}

TEST(RoiMaxPool, MatchesBruteForceBins) {
  std::mt19937_64 rng(4);
  const auto f = random_tensor({2, 9, 11}, rng);
  for (const nn::CellRange r : {nn::CellRange{0, 0, 11, 9}, nn::CellRange{2, 3, 4, 4}, nn::CellRange{5, 1, 10, 8},
                                nn::CellRange{7, 7, 8, 8}}) {
    nn::RoiPoolCache cache;
    const auto got = nn::roi_max_pool(f, r, 3, &cache);
    const int lx = r.x1 - r.x0, ly = r.y1 - r.y0;
    for (int c = 0; c < 2; ++c)
      for (int py = 0; py < 3; ++py)
        for (int px = 0; px < 3; ++px) {
          // Bin j covers [floor(j L / P), ceil((j + 1) L / P)).
          const int ys = r.y0 + static_cast<int>(std::floor(py * ly / 3.0));
          const int ye = r.y0 + static_cast<int>(std::ceil((py + 1) * ly / 3.0));
          const int xs = r.x0 + static_cast<int>(std::floor(px * lx / 3.0));
          const int xe = r.x0 + static_cast<int>(std::ceil((px + 1) * lx / 3.0));
          double best = -1e300;
          for (int y = ys; y < ye; ++y)
            for (int x = xs; x < xe; ++x) best = std::max(best, f.at(c, y, x));
          EXPECT_EQ(got.at(c, py, px), best);
        }
    // Backward routes each output gradient to its argmax cell.
    std::vector<double> g(got.size(), 1.0);
    Tensor gf = f.zeros_like();
    nn::roi_max_pool_backward(cache, g, gf);
    double total = 0;
    for (double v : gf.data) total += v;
    EXPECT_DOUBLE_EQ(total, static_cast<double>(got.size()));
  }
  EXPECT_THROW(nn::roi_max_pool(f, {3, 3, 3, 5}, 3, nullptr), std::invalid_argument);
}

TEST(CoveredCells, ProjectsAndSnapsSmallBoxes) {
  const auto c = covered_cells(Box(5, 9, 20, 17), 4, 16, 16);
  EXPECT_EQ(c.x0, 1);
  EXPECT_EQ(c.x1, 5);
  EXPECT_EQ(c.y0, 2);
  EXPECT_EQ(c.y1, 5);
  const auto edge = covered_cells(Box(62, 62, 64, 64), 8, 8, 8);
  EXPECT_EQ(edge.x0, 7);
  EXPECT_EQ(edge.x1, 8);
}

TEST(Softmax, StableAndNormalised) {
  const std::vector<double> z{1000.0, 1001.0, 999.0};
  const auto p = nn::softmax(z);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
  EXPECT_GT(p[1], p[0]);
  EXPECT_NEAR(nn::log_sum_exp(z), 1001.0 + std::log(std::exp(-1.0) + 1.0 + std::exp(-2.0)), 1e-12);
}
