#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_util.hpp"
#include "websod/region_estimator.hpp"

using namespace websod;
using namespace websod::region;

namespace {

const Vocabulary kVocab({"circle", "square", "star"});

std::vector<Detection> random_detections(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0, 1), pos(0, 40), len(3, 20);
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    out.push_back({Box(x, y, x + len(rng), y + len(rng)), static_cast<int>(rng() % 3), u(rng)});
  }
  return out;
}

}  // namespace

TEST(PseudoLabels, KeepHighScoresAndTakeTheImageLabel) {
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 200; ++trial) {
    const auto dets = random_detections(rng, trial % 12);
    const int label = trial % 3;
    const EstimatorConfig cfg{0.8, 20};
    const auto p = pseudo_from_detections("w" + std::to_string(trial), label, dets, cfg);
    EXPECT_NO_THROW(p.validate(0.8));
    const auto expected = std::count_if(dets.begin(), dets.end(), [](const Detection& d) { return d.score >= 0.8; });
    EXPECT_EQ(static_cast<long>(p.boxes.size()), expected);
    for (std::size_t i = 0; i < p.boxes.size(); ++i) {
      EXPECT_EQ(p.boxes[i].class_id, label);
      if (i) {
        EXPECT_GE(p.boxes[i - 1].score, p.boxes[i].score);
      }
    }
  }
}

TEST(PseudoLabels, ScoreExactlyAtThresholdIsKept) {
  const std::vector<Detection> dets{{Box(0, 0, 5, 5), 1, 0.8}, {Box(1, 1, 6, 6), 0, 0.7999999}};
  const auto p = pseudo_from_detections("w", 2, dets, {0.8, 20});
  ASSERT_EQ(p.boxes.size(), 1u);
  EXPECT_EQ(p.boxes[0].score, 0.8);
}

TEST(PseudoLabels, RaisingTheThresholdOnlyRemovesBoxes) {
  std::mt19937_64 rng(41);
  const auto dets = random_detections(rng, 40);
  std::size_t previous = dets.size() + 1;
  std::vector<PseudoBox> previous_boxes;
  for (double t = 0.05; t <= 1.0; t += 0.05) {
    const auto p = pseudo_from_detections("w", 0, dets, {t, 100});
    EXPECT_LE(p.boxes.size(), previous);
    for (const auto& b : p.boxes)
      EXPECT_TRUE(std::any_of(previous_boxes.begin(), previous_boxes.end(),
                              [&](const PseudoBox& q) { return q.box == b.box && q.score == b.score; }) ||
                  previous_boxes.empty());
    previous = p.boxes.size();
    previous_boxes = p.boxes;
  }
}

TEST(PseudoLabels, CapKeepsTheHighestScores) {
  const std::vector<Detection> dets{{Box(0, 0, 5, 5), 0, 0.85}, {Box(1, 1, 6, 6), 0, 0.99}, {Box(2, 2, 7, 7), 1, 0.9}};
  const auto p = pseudo_from_detections("w", 1, dets, {0.8, 2});
  ASSERT_EQ(p.boxes.size(), 2u);
  EXPECT_EQ(p.boxes[0].score, 0.99);
  EXPECT_EQ(p.boxes[1].score, 0.9);
}

TEST(PseudoLabels, ConfigValidation) {
  EXPECT_THROW((EstimatorConfig{0.0, 20}.validate()), std::invalid_argument);
  EXPECT_THROW((EstimatorConfig{1.2, 20}.validate()), std::invalid_argument);
  EXPECT_THROW((EstimatorConfig{0.5, 0}.validate()), std::invalid_argument);
}

TEST(PseudoLabels, EstimatorOnARealDetectorHonoursTheContract) {
  det::DetectorConfig c;
  c.num_classes = 3;
  c.backbone_channels = {4, 4};
  c.backbone_strides = {2, 2};
  c.rpn_channels = 4;
  c.fc_dim = 8;
  c.cam_channels = 4;
  auto params = det::init_detector(c, 9);
  std::mt19937_64 rng(42);
  // Large classifier weights push some scores above the threshold.
  params.cls.weight = websod::testing::random_tensor(params.cls.weight.shape, rng, -6.0, 6.0);
  params.cls.bias = websod::testing::random_tensor(params.cls.bias.shape, rng, -2.0, 2.0);
  for (int i = 0; i < 5; ++i) {
    WebImageRecord rec{"w" + std::to_string(i), websod::testing::random_tensor({3, 32, 32}, rng, 0.0, 1.0), i % 3};
    const auto p = estimate_regions(rec, params, {0.5, 20});
    EXPECT_EQ(p.image_id, rec.image_id);
    EXPECT_EQ(p.image_label, rec.image_label);
    EXPECT_NO_THROW(p.validate(0.5));
  }
}

TEST(PseudoQuality, PrecisionAndRecallByHand) {
  const std::vector<PseudoAnnotation> pseudo{
      {"a", 0, {{Box(0, 0, 10, 10), 0, 0.9}, {Box(30, 30, 40, 40), 0, 0.85}}},
      {"b", 1, {}},
  };
  const std::vector<std::vector<GroundTruth>> gt{{{Box(1, 0, 10, 10), 0}}, {{Box(0, 0, 8, 8), 1}}};
  const auto q = pseudo_label_quality(pseudo, gt);
  EXPECT_EQ(q.num_pseudo, 2);
  EXPECT_EQ(q.num_gt, 2);
  EXPECT_DOUBLE_EQ(q.precision, 0.5);
  EXPECT_DOUBLE_EQ(q.recall, 0.5);
  EXPECT_TRUE(q.precision_defined);
  const std::vector<PseudoAnnotation> empty{{"b", 1, {}}};
  const std::vector<std::vector<GroundTruth>> one{{{Box(0, 0, 8, 8), 1}}};
  EXPECT_FALSE(pseudo_label_quality(empty, one).precision_defined);
  EXPECT_THROW(pseudo_label_quality(empty, gt), std::invalid_argument);
}

TEST(PseudoJson, RoundTrip) {
  const std::vector<PseudoAnnotation> pseudo{
      {"web_00001", 2, {{Box(0.5, 1.25, 10, 12.75), 2, 0.91234567891}, {Box(3, 3, 9, 9), 2, 0.8}}},
      {"web_00002", 0, {}},
  };
  const auto text = write_pseudo_annotations(pseudo, kVocab);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  const auto back = read_pseudo_annotations(text, kVocab);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].image_id, "web_00001");
  EXPECT_EQ(back[0].image_label, 2);
  ASSERT_EQ(back[0].boxes.size(), 2u);
  EXPECT_EQ(back[0].boxes[0].box, pseudo[0].boxes[0].box);
  EXPECT_EQ(back[0].boxes[0].score, pseudo[0].boxes[0].score);
  EXPECT_TRUE(back[1].boxes.empty());
  EXPECT_EQ(write_pseudo_annotations(back, kVocab), text);
}

TEST(PseudoJson, ErrorsNameTheLine) {
  const std::string bad = "{\"image_id\":\"a\",\"label\":\"circle\",\"boxes\":[]}\n{\"image_id\":\"b\",\"label\":\"hexagon\",\"boxes\":[]}\n";
  try {
    read_pseudo_annotations(bad, kVocab);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(read_pseudo_annotations("{not json}\n", kVocab), IngestionError);
}
