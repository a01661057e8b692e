#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "websod/box.hpp"
#include "websod/datamodel.hpp"

// VOC-style detection evaluation.
namespace websod::eval {

struct ScoredBox {
  Box box;
  double score;
};

/// TP/FP flags of one image and one class, detections in descending score order
/// (ties by ascending input index).
struct MatchResult {
  std::vector<double> scores;
  std::vector<bool> true_positive;
  std::vector<int> matched_gt;  // gt index per detection, -1 for FP
  int num_gt = 0;
};

MatchResult match_detections(std::span<const ScoredBox> dets, std::span<const Box> gts, double iou_threshold);

enum class ApMethod { ElevenPoint, AllPoint };

/// AP over the concatenation of per-image results. Detections from all images
/// are ranked by score; equal scores keep image order, then in-image order.
double average_precision(std::span<const MatchResult> results, int num_gt, ApMethod method = ApMethod::ElevenPoint);

struct EvalReport {
  std::vector<std::optional<double>> per_class_ap;  // empty when the class has no ground truth
  double base_mean = 0.0;
  double novel_mean = 0.0;
  double map = 0.0;
  double iou_threshold = 0.5;
  ApMethod method = ApMethod::ElevenPoint;
};

/// Arithmetic means over the base and novel partitions and over all classes.
/// Every vocabulary class needs an entry; an entry without a value (no ground
/// truth) is left out of the means.
EvalReport mean_ap(std::span<const std::optional<double>> per_class_ap, const ClassSplit& split);

struct ImageResult {
  std::vector<Detection> detections;
  std::vector<GroundTruth> ground_truth;
};

/// Classes without ground truth get no AP and are left out of the means.
EvalReport evaluate(std::span<const ImageResult> images, int num_classes, const ClassSplit& split,
                    double iou_threshold = 0.5, ApMethod method = ApMethod::ElevenPoint);

/// Per-class AP table, novel classes first, followed by `key=value` lines.
std::string format_report(const EvalReport& report, const Vocabulary& vocab, const ClassSplit& split);
std::string format_report_kv(const EvalReport& report, const Vocabulary& vocab, std::string_view prefix = "");

}  // namespace websod::eval
