#include <gtest/gtest.h>

#include <algorithm>

#include "websod/evaluation.hpp"

using namespace websod;
using namespace websod::eval;

namespace {

// 11-point AP in integer arithmetic: recall tp/num_gt >= k/10 iff 10 tp >= k num_gt.
double oracle_eleven(const std::vector<bool>& tp, int num_gt) {
  double ap = 0;
  for (int k = 0; k <= 10; ++k) {
    double best = 0;
    int hits = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      hits += tp[i];
      if (10 * hits >= k * num_gt) best = std::max(best, static_cast<double>(hits) / static_cast<double>(i + 1));
    }
    ap += best / 11.0;
  }
  return ap;
}

// Area under the precision envelope with sentinels at recall 0 and 1.
double oracle_all_point(const std::vector<bool>& tp, int num_gt) {
  std::vector<double> rec{0.0}, prec{0.0};
  int hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i];
    rec.push_back(static_cast<double>(hits) / num_gt);
    prec.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (std::size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0;
  for (std::size_t i = 1; i < rec.size(); ++i) ap += (rec[i] - rec[i - 1]) * prec[i];
  return ap;
}

MatchResult ranked(const std::vector<bool>& tp, int num_gt) {
  MatchResult r;
  r.num_gt = num_gt;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    r.scores.push_back(1.0 - 0.1 * static_cast<double>(i));
    r.true_positive.push_back(tp[i]);
    r.matched_gt.push_back(tp[i] ? 0 : -1);
  }
  return r;
}

const Vocabulary kVocab({"a", "b", "c", "d"});
const ClassSplit kSplit(kVocab, {"a", "b"}, {"c", "d"});

}  // namespace

TEST(AveragePrecision, MatchesStaircaseOracleExhaustively) {
  int cases = 0;
  for (int num_gt = 1; num_gt <= 3; ++num_gt)
    for (int n = 0; n <= 5; ++n)
      for (int mask = 0; mask < (1 << n); ++mask) {
        std::vector<bool> tp;
        for (int i = 0; i < n; ++i) tp.push_back((mask >> i) & 1);
        if (std::count(tp.begin(), tp.end(), true) > num_gt) continue;
        const std::vector<MatchResult> r{ranked(tp, num_gt)};
        EXPECT_NEAR(average_precision(r, num_gt, ApMethod::ElevenPoint), oracle_eleven(tp, num_gt), 1e-12);
        EXPECT_NEAR(average_precision(r, num_gt, ApMethod::AllPoint), oracle_all_point(tp, num_gt), 1e-12);
        ++cases;
      }
  EXPECT_GT(cases, 100);
}

TEST(AveragePrecision, KnownValues) {
  const std::vector<MatchResult> perfect{ranked({true, true}, 2)};
  EXPECT_DOUBLE_EQ(average_precision(perfect, 2, ApMethod::ElevenPoint), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(perfect, 2, ApMethod::AllPoint), 1.0);
  const std::vector<MatchResult> none{ranked({false, false}, 2)};
  EXPECT_EQ(average_precision(none, 2), 0.0);
  // FP then TP with one gt: precision 1/2 at recall 1.
  const std::vector<MatchResult> late{ranked({false, true}, 1)};
  EXPECT_DOUBLE_EQ(average_precision(late, 1, ApMethod::AllPoint), 0.5);
  EXPECT_DOUBLE_EQ(average_precision(late, 1, ApMethod::ElevenPoint), 0.5);
  EXPECT_THROW(average_precision(late, 0), std::invalid_argument);
}

TEST(AveragePrecision, BoundedAndMonotoneInExtraTruePositives) {
  for (int mask = 0; mask < 32; ++mask) {
    std::vector<bool> tp;
    for (int i = 0; i < 5; ++i) tp.push_back((mask >> i) & 1);
    const std::vector<MatchResult> r{ranked(tp, 5)};
    const double ap = average_precision(r, 5, ApMethod::AllPoint);
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
    // Turning the first FP into a TP never lowers AP.
    auto better = tp;
    const auto fp = std::find(better.begin(), better.end(), false);
    if (fp == better.end()) continue;
    *fp = true;
    const std::vector<MatchResult> rb{ranked(better, 5)};
    EXPECT_GE(average_precision(rb, 5, ApMethod::AllPoint), ap);
  }
}

TEST(Matching, HighestIouUnmatchedGroundTruth) {
  const std::vector<Box> gts{Box(0, 0, 10, 10), Box(2, 0, 12, 10)};
  // Overlaps gt1 more than gt0.
  const std::vector<ScoredBox> dets{{Box(2, 0, 12, 10), 0.9}, {Box(0, 0, 10, 10), 0.8}, {Box(0, 0, 10, 10), 0.7}};
  const auto r = match_detections(dets, gts, 0.5);
  EXPECT_EQ(r.matched_gt, (std::vector<int>{1, 0, -1}));
  EXPECT_EQ(r.true_positive, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(r.num_gt, 2);
}

TEST(Matching, EqualIouGoesToLowerIndexAndScoresAreSorted) {
  const std::vector<Box> gts{Box(0, 0, 10, 10), Box(0, 0, 10, 10)};
  const std::vector<ScoredBox> dets{{Box(0, 0, 10, 10), 0.2}, {Box(0, 0, 10, 10), 0.6}};
  const auto r = match_detections(dets, gts, 0.5);
  EXPECT_EQ(r.scores, (std::vector<double>{0.6, 0.2}));
  EXPECT_EQ(r.matched_gt, (std::vector<int>{0, 1}));
}

TEST(Matching, ThresholdIsInclusive) {
  // IoU of these two is exactly 0.5.
  const std::vector<Box> gts{Box(0, 0, 10, 10)};
  const std::vector<ScoredBox> dets{{Box(0, 0, 10, 5), 1.0}};
  EXPECT_TRUE(match_detections(dets, gts, 0.5).true_positive[0]);
  EXPECT_FALSE(match_detections(dets, gts, 0.7).true_positive[0]);
}

TEST(MeanAp, SplitsBaseAndNovelAndSkipsMissingClasses) {
  const std::vector<std::optional<double>> aps{0.8, 0.6, std::nullopt, 0.3};
  const auto r = mean_ap(aps, kSplit);
  EXPECT_DOUBLE_EQ(r.base_mean, 0.7);
  EXPECT_DOUBLE_EQ(r.novel_mean, 0.3);
  EXPECT_NEAR(r.map, (0.8 + 0.6 + 0.3) / 3, 1e-15);
  EXPECT_THROW(mean_ap(std::vector<std::optional<double>>{0.1}, kSplit), std::invalid_argument);
}

TEST(Evaluate, PerClassApAndMissingGroundTruth) {
  std::vector<ImageResult> images(2);
  images[0].ground_truth = {{Box(0, 0, 10, 10), 0}, {Box(20, 20, 30, 30), 2}};
  images[0].detections = {{Box(0, 0, 10, 10), 0, 0.9}, {Box(20, 20, 30, 30), 2, 0.4}, {Box(40, 40, 50, 50), 2, 0.8}};
  images[1].ground_truth = {{Box(5, 5, 15, 15), 1}};
  images[1].detections = {{Box(30, 30, 40, 40), 3, 0.9}};  // class 3 has no ground truth
  const auto r = evaluate(images, 4, kSplit);
  ASSERT_TRUE(r.per_class_ap[0]);
  EXPECT_DOUBLE_EQ(*r.per_class_ap[0], 1.0);
  EXPECT_EQ(*r.per_class_ap[1], 0.0);
  EXPECT_NEAR(*r.per_class_ap[2], oracle_eleven({false, true}, 1), 1e-12);
  EXPECT_FALSE(r.per_class_ap[3]);
  EXPECT_DOUBLE_EQ(r.novel_mean, *r.per_class_ap[2]);
  EXPECT_DOUBLE_EQ(r.base_mean, 0.5);
}

TEST(Evaluate, StricterIouNeverRaisesAp) {
  std::vector<ImageResult> images(1);
  images[0].ground_truth = {{Box(0, 0, 20, 20), 0}, {Box(30, 30, 50, 50), 1}};
  images[0].detections = {{Box(2, 2, 22, 22), 0, 0.9}, {Box(33, 30, 53, 50), 1, 0.7}, {Box(0, 0, 18, 20), 0, 0.5}};
  const auto loose = evaluate(images, 4, kSplit, 0.5);
  const auto strict = evaluate(images, 4, kSplit, 0.7);
  EXPECT_LE(strict.map, loose.map);
}

TEST(Report, ListsNovelClassesFirst) {
  const std::vector<std::optional<double>> aps{0.8, 0.6, std::nullopt, 0.3};
  const auto text = format_report(mean_ap(aps, kSplit), kVocab, kSplit);
  const auto first = text.find('\n') + 1;
  const auto head = text.substr(first, text.find('\n', first) - first);
  EXPECT_LT(head.find(" c"), head.find(" a"));
  EXPECT_NE(text.find("-"), std::string::npos);
  const auto kv = format_report_kv(mean_ap(aps, kSplit), kVocab);
  EXPECT_NE(kv.find("mean.novel="), std::string::npos);
}
