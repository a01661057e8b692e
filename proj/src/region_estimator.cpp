#include "websod/region_estimator.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace websod::region {

using json = nlohmann::json;

void EstimatorConfig::validate() const {
  if (!(score_threshold > 0.0 && score_threshold <= 1.0))
    throw std::invalid_argument("estimator score threshold must lie in (0, 1]");
  if (max_boxes_per_image < 1) throw std::invalid_argument("max_boxes_per_image must be positive");
}

PseudoAnnotation pseudo_from_detections(const std::string& image_id, int image_label,
                                        std::span<const Detection> detections, const EstimatorConfig& cfg) {
  std::vector<Detection> kept;
  for (const auto& d : detections)
    if (d.score >= cfg.score_threshold) kept.push_back(d);
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(kept.size()) > cfg.max_boxes_per_image)
    kept.erase(kept.begin() + cfg.max_boxes_per_image, kept.end());
  PseudoAnnotation out{image_id, image_label, {}};
  for (const auto& d : kept) out.boxes.push_back({d.box, image_label, d.score});
  return out;
}

PseudoAnnotation estimate_regions(const WebImageRecord& record, const det::DetectorParams& base_params,
                                  const EstimatorConfig& cfg) {
  cfg.validate();
  // Per-class NMS runs inside detect() before thresholding; classes are dropped here.
  const auto dets = det::detect(record.image, base_params, cfg.score_threshold);
  return pseudo_from_detections(record.image_id, record.image_label, dets, cfg);
}

PseudoQuality pseudo_label_quality(std::span<const PseudoAnnotation> pseudo,
                                   std::span<const std::vector<GroundTruth>> gt, double iou_threshold) {
  if (pseudo.size() != gt.size()) throw std::invalid_argument("pseudo_label_quality: image count mismatch");
  PseudoQuality q;
  int good_pseudo = 0, covered_gt = 0;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    for (const auto& p : pseudo[i].boxes) {
      ++q.num_pseudo;
      const bool hit = std::any_of(gt[i].begin(), gt[i].end(), [&](const GroundTruth& g) {
        return g.class_id == p.class_id && iou(g.box, p.box) >= iou_threshold;
      });
      good_pseudo += hit;
    }
    for (const auto& g : gt[i]) {
      ++q.num_gt;
      const bool hit = std::any_of(pseudo[i].boxes.begin(), pseudo[i].boxes.end(), [&](const PseudoBox& p) {
        return g.class_id == p.class_id && iou(g.box, p.box) >= iou_threshold;
      });
      covered_gt += hit;
    }
  }
  q.precision_defined = q.num_pseudo > 0;
  q.precision = q.num_pseudo ? static_cast<double>(good_pseudo) / q.num_pseudo : 0.0;
  q.recall = q.num_gt ? static_cast<double>(covered_gt) / q.num_gt : 0.0;
  return q;
}

std::string write_pseudo_annotations(std::span<const PseudoAnnotation> pseudo, const Vocabulary& vocab) {
  std::ostringstream os;
  for (const auto& p : pseudo) {
    json rec;
    rec["image_id"] = p.image_id;
    rec["label"] = vocab.name(p.image_label);
    rec["boxes"] = json::array();
    for (const auto& b : p.boxes)
      rec["boxes"].push_back({b.box.x1(), b.box.y1(), b.box.x2(), b.box.y2(), vocab.name(b.class_id), b.score});
    os << rec.dump() << "\n";
  }
  return os.str();
}

std::vector<PseudoAnnotation> read_pseudo_annotations(std::string_view text, const Vocabulary& vocab) {
  std::vector<PseudoAnnotation> out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  auto label_of = [&](const std::string& name) {
    auto id = vocab.find(name);
    if (!id) throw IngestionError("pseudo annotations line " + std::to_string(line_no) + ": unknown label " + name);
    return *id;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto rec = json::parse(line);
      PseudoAnnotation p;
      p.image_id = rec.at("image_id").get<std::string>();
      p.image_label = label_of(rec.at("label").get<std::string>());
      for (const auto& b : rec.at("boxes"))
        p.boxes.push_back({Box(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()),
                           label_of(b.at(4).get<std::string>()), b.at(5).get<double>()});
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw IngestionError("pseudo annotations line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace websod::region
