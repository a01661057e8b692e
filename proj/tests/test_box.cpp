#include <gtest/gtest.h>

#include <random>

#include "websod/box.hpp"

using websod::Box;

namespace {

// Counts cells of a grid with pitch 1/sub covered by both / either box.
double pixel_iou(const Box& a, const Box& b, int sub) {
  long inter = 0, uni = 0;
  for (int y = 0; y < 40 * sub; ++y)
    for (int x = 0; x < 40 * sub; ++x) {
      const double cx = (x + 0.5) / sub, cy = (y + 0.5) / sub;
      const bool in_a = cx > a.x1() && cx < a.x2() && cy > a.y1() && cy < a.y2();
      const bool in_b = cx > b.x1() && cx < b.x2() && cy > b.y1() && cy < b.y2();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Box random_grid_box(std::mt19937_64& rng, int sub) {
  std::uniform_int_distribution<int> pos(0, 30 * sub), len(1, 10 * sub);
  const int x = pos(rng), y = pos(rng);
  return Box(static_cast<double>(x) / sub, static_cast<double>(y) / sub, static_cast<double>(x + len(rng)) / sub,
             static_cast<double>(y + len(rng)) / sub);
}

}  // namespace

TEST(Iou, MatchesPixelEnumerationOnIntegerBoxes) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    const Box a = random_grid_box(rng, 1), b = random_grid_box(rng, 1);
    EXPECT_NEAR(websod::iou(a, b), pixel_iou(a, b, 1), 1e-9) << websod::to_string(a) << " " << websod::to_string(b);
  }
}

TEST(Iou, MatchesPixelEnumerationOnHalfPixelBoxes) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const Box a = random_grid_box(rng, 2), b = random_grid_box(rng, 2);
    EXPECT_NEAR(websod::iou(a, b), pixel_iou(a, b, 2), 1e-9);
  }
}

TEST(Iou, IdentityDisjointAndSymmetry) {
  const Box a(1, 2, 5, 9), b(10, 10, 12, 12);
  EXPECT_DOUBLE_EQ(websod::iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(websod::iou(a, b), 0.0);
  const Box c(3, 4, 8, 8);
  EXPECT_DOUBLE_EQ(websod::iou(a, c), websod::iou(c, a));
  // Touching edges share no area.
  EXPECT_DOUBLE_EQ(websod::iou(Box(0, 0, 2, 2), Box(2, 0, 4, 2)), 0.0);
}

TEST(Box, RejectsDegenerateAndNonFinite) {
  EXPECT_THROW(Box(0, 0, 0, 5), std::invalid_argument);
  EXPECT_THROW(Box(3, 0, 1, 5), std::invalid_argument);
  EXPECT_THROW(Box(0, 0, std::nan(""), 5), std::invalid_argument);
  EXPECT_THROW(Box(0, 0, 1, std::numeric_limits<double>::infinity()), std::invalid_argument);
}

TEST(Box, ClipKeepsInsideImage) {
  double x1 = -3, y1 = 2, x2 = 70, y2 = 10;
  ASSERT_TRUE(Box::clip(x1, y1, x2, y2, 64, 64));
  EXPECT_EQ(x1, 0.0);
  EXPECT_EQ(x2, 64.0);
  double a = 70, b = 1, c = 80, d = 5;
  EXPECT_FALSE(Box::clip(a, b, c, d, 64, 64));
}
