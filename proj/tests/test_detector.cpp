#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "websod/detector.hpp"

using namespace websod;
using websod::testing::random_tensor;

namespace {

det::DetectorConfig small_config() {
  det::DetectorConfig c;
  c.num_classes = 3;
  c.backbone_channels = {4, 6};
  c.backbone_strides = {2, 2};
  c.rpn_channels = 4;
  c.anchor_sizes = {8.0, 14.0};
  c.anchor_ratios = {0.5, 1.0, 2.0};
  c.pool_size = 2;
  c.fc_dim = 8;
  c.cam_channels = 4;
  return c;
}

// Reference greedy NMS written independently of the library.
std::vector<int> oracle_nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<int> keep;
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (alive[i] && (best < 0 || scores[i] > scores[static_cast<std::size_t>(best)])) best = static_cast<int>(i);
    if (best < 0) return keep;
    keep.push_back(best);
    alive[static_cast<std::size_t>(best)] = false;
    for (std::size_t j = 0; j < boxes.size(); ++j)
      if (alive[j] && iou(boxes[static_cast<std::size_t>(best)], boxes[j]) > thr) alive[j] = false;
  }
}

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0, 40), len(2, 20);
  const double x = pos(rng), y = pos(rng);
  return Box(x, y, x + len(rng), y + len(rng));
}

}  // namespace

TEST(BoxCoding, EncodeDecodeRoundTrip) {
  std::mt19937_64 rng(30);
  for (int i = 0; i < 500; ++i) {
    const Box p = random_box(rng), t = random_box(rng);
    const Box back = det::decode_delta(p, det::encode_delta(p, t));
    EXPECT_NEAR(back.x1(), t.x1(), 1e-9);
    EXPECT_NEAR(back.y1(), t.y1(), 1e-9);
    EXPECT_NEAR(back.x2(), t.x2(), 1e-9);
    EXPECT_NEAR(back.y2(), t.y2(), 1e-9);
  }
  const auto zero = det::encode_delta(Box(1, 2, 9, 6), Box(1, 2, 9, 6));
  EXPECT_EQ(zero.tx, 0.0);
  EXPECT_EQ(zero.tw, 0.0);
}

TEST(BoxCoding, DeltaIsScaleInvariant) {
  const auto a = det::encode_delta(Box(0, 0, 10, 10), Box(2, 1, 14, 9));
  const auto b = det::encode_delta(Box(0, 0, 20, 20), Box(4, 2, 28, 18));
  EXPECT_NEAR(a.tx, b.tx, 1e-12);
  EXPECT_NEAR(a.ty, b.ty, 1e-12);
  EXPECT_NEAR(a.tw, b.tw, 1e-12);
  EXPECT_NEAR(a.th, b.th, 1e-12);
}

TEST(Losses, SmoothL1Values) {
  EXPECT_EQ(det::smooth_l1(0.0), 0.0);
  EXPECT_DOUBLE_EQ(det::smooth_l1(0.5), 0.125);
  EXPECT_DOUBLE_EQ(det::smooth_l1(-2.0), 1.5);
  EXPECT_DOUBLE_EQ(det::smooth_l1(1.0), 0.5);
  EXPECT_EQ(det::smooth_l1_grad(-5.0), -1.0);
  EXPECT_EQ(det::smooth_l1_grad(0.25), 0.25);
}

TEST(Losses, ClassLogLoss) {
  const std::vector<double> p{0.2, 0.5, 0.3};
  EXPECT_DOUBLE_EQ(det::cls_log_loss(p, 1), -std::log(0.5));
  const std::vector<double> zero{1.0, 0.0};
  EXPECT_DOUBLE_EQ(det::cls_log_loss(zero, 1), -std::log(1e-12));
  EXPECT_THROW(det::cls_log_loss(std::vector<double>{0.5, 0.4}, 0), std::invalid_argument);
  EXPECT_THROW(det::cls_log_loss(p, 3), std::out_of_range);
}

TEST(Nms, MatchesGreedyOracle) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + trial % 15;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_box(rng));
      // Coarse scores so ties occur.
      scores.push_back(std::round(u(rng) * 5) / 5);
    }
    for (double thr : {0.1, 0.3, 0.7}) EXPECT_EQ(det::nms(boxes, scores, thr), oracle_nms(boxes, scores, thr));
  }
}

TEST(Nms, KeptBoxesOverlapAtMostThreshold) {
  std::mt19937_64 rng(32);
  std::vector<Box> boxes;
  std::vector<double> scores;
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 60; ++i) {
    boxes.push_back(random_box(rng));
    scores.push_back(u(rng));
  }
  const auto keep = det::nms(boxes, scores, 0.4);
  for (std::size_t a = 0; a < keep.size(); ++a)
    for (std::size_t b = a + 1; b < keep.size(); ++b)
      EXPECT_LE(iou(boxes[static_cast<std::size_t>(keep[a])], boxes[static_cast<std::size_t>(keep[b])]), 0.4);
}

TEST(Anchors, CountCentresAndShapes) {
  const auto c = small_config();
  const int fh = 3, fw = 5;
  const auto anchors = det::make_anchors(c, fh, fw);
  ASSERT_EQ(anchors.size(), static_cast<std::size_t>(fh * fw * c.num_anchors()));
  const int y = 2, x = 3, a = 4;  // size 14, ratio 1
  const Box& b = anchors[static_cast<std::size_t>((y * fw + x) * c.num_anchors() + a)];
  EXPECT_DOUBLE_EQ(b.center_x(), (x + 0.5) * 4);
  EXPECT_DOUBLE_EQ(b.center_y(), (y + 0.5) * 4);
  EXPECT_DOUBLE_EQ(b.width(), 14.0);
  const Box& tall = anchors[static_cast<std::size_t>((y * fw + x) * c.num_anchors() + 2)];  // size 8, ratio 2
  EXPECT_NEAR(tall.height() / tall.width(), 2.0, 1e-12);
  EXPECT_NEAR(tall.area(), 64.0, 1e-9);
}

TEST(Detector, ConfigValidation) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.stride(), 4);
  c.backbone_strides = {2};
  EXPECT_ANY_THROW(c.validate());
  c = small_config();
  c.num_classes = 0;
  EXPECT_ANY_THROW(c.validate());
}

TEST(Detector, HeadOutputShapes) {
  const auto params = det::init_detector(small_config(), 3);
  std::mt19937_64 rng(33);
  const auto image = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  const auto fm = det::extract_features(image, params);
  EXPECT_EQ(fm.stride, 4);
  EXPECT_EQ(fm.height(), 8);
  const std::vector<Box> rois{Box(0, 0, 16, 16), Box(4, 8, 30, 31)};
  const auto out = det::head_forward(fm, rois, params, nullptr, nullptr);
  EXPECT_EQ(out.logits.shape, (std::vector<int>{2, 4}));
  EXPECT_EQ(out.deltas.shape, (std::vector<int>{2, 12}));
}

TEST(Detector, DetectionsDoNotDependOnRoiOrder) {
  auto params = det::init_detector(small_config(), 5);
  std::mt19937_64 rng(34);
  params.cls.weight = random_tensor(params.cls.weight.shape, rng, -1.0, 1.0);
  params.reg.weight = random_tensor(params.reg.weight.shape, rng, -0.1, 0.1);
  const auto image = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  const auto fm = det::extract_features(image, params);
  std::vector<RoI> rois;
  for (int i = 0; i < 12; ++i) {
    const Box b = random_box(rng);
    double x1 = b.x1(), y1 = b.y1(), x2 = b.x2(), y2 = b.y2();
    if (Box::clip(x1, y1, x2, y2, 32, 32) && x2 - x1 > 1 && y2 - y1 > 1) rois.push_back({Box(x1, y1, x2, y2), 0.5});
  }
  const auto ref = det::detect_from_rois(fm, rois, params, 0.0, 32, 32);
  ASSERT_FALSE(ref.empty());
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(rois.begin(), rois.end(), rng);
    const auto got = det::detect_from_rois(fm, rois, params, 0.0, 32, 32);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].box, ref[i].box);
      EXPECT_EQ(got[i].class_id, ref[i].class_id);
      EXPECT_EQ(got[i].score, ref[i].score);
    }
  }
}

TEST(Detector, DetectionsAreSortedValidAndAboveThreshold) {
  auto params = det::init_detector(small_config(), 6);
  std::mt19937_64 rng(35);
  params.cls.weight = random_tensor(params.cls.weight.shape, rng, -2.0, 2.0);
  const auto image = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  const auto dets = det::detect(image, params, 0.05);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_GE(dets[i].score, 0.05);
    EXPECT_LE(dets[i].score, 1.0);
    EXPECT_GE(dets[i].class_id, 0);
    EXPECT_LT(dets[i].class_id, 3);
    EXPECT_GE(dets[i].box.x1(), 0.0);
    EXPECT_LE(dets[i].box.x2(), 32.0);
    if (i) {
      EXPECT_GE(dets[i - 1].score, dets[i].score);
    }
  }
}
