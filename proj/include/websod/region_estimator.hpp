#pragma once

#include <span>
#include <string>
#include <vector>

#include "websod/datamodel.hpp"
#include "websod/detector.hpp"

// Uses a base-class detector as a class-agnostic object region estimator on
// web images.
namespace websod::region {

struct EstimatorConfig {
  double score_threshold = 0.8;
  int max_boxes_per_image = 20;

  void validate() const;
};

/// Keeps detections of any class with score >= threshold, highest scores first,
/// and relabels them with the image label.
PseudoAnnotation pseudo_from_detections(const std::string& image_id, int image_label,
                                        std::span<const Detection> detections, const EstimatorConfig& cfg);

PseudoAnnotation estimate_regions(const WebImageRecord& record, const det::DetectorParams& base_params,
                                  const EstimatorConfig& cfg);

struct PseudoQuality {
  double precision = 0.0;
  double recall = 0.0;
  bool precision_defined = false;  // false when there are no pseudo boxes
  int num_pseudo = 0;
  int num_gt = 0;
};

/// Precision: fraction of pseudo boxes overlapping (IoU >= iou) some ground-truth
/// box of their class on the same image. Recall: fraction of ground-truth boxes
/// overlapped by some pseudo box of their class.
PseudoQuality pseudo_label_quality(std::span<const PseudoAnnotation> pseudo,
                                   std::span<const std::vector<GroundTruth>> gt, double iou_threshold = 0.5);

/// JSON lines, one record per image:
/// {"image_id": ..., "label": ..., "boxes": [[x1,y1,x2,y2,label,score], ...]}
std::string write_pseudo_annotations(std::span<const PseudoAnnotation> pseudo, const Vocabulary& vocab);
std::vector<PseudoAnnotation> read_pseudo_annotations(std::string_view text, const Vocabulary& vocab);

}  // namespace websod::region
