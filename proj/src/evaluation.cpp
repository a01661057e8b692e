#include "websod/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace websod::eval {

MatchResult match_detections(std::span<const ScoredBox> dets, std::span<const Box> gts, double iou_threshold) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dets[a].score > dets[b].score; });
  MatchResult r;
  r.num_gt = static_cast<int>(gts.size());
  std::vector<char> used(gts.size(), 0);
  for (int i : order) {
    const auto& d = dets[static_cast<std::size_t>(i)];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(d.box, gts[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) used[static_cast<std::size_t>(best)] = 1;
    r.scores.push_back(d.score);
    r.true_positive.push_back(best >= 0);
    r.matched_gt.push_back(best);
  }
  return r;
}

double average_precision(std::span<const MatchResult> results, int num_gt, ApMethod method) {
  if (num_gt < 1) throw std::invalid_argument("average_precision needs at least one ground-truth box");
  struct Entry {
    double score;
    bool tp;
  };
  std::vector<Entry> all;
  for (const auto& r : results)
    for (std::size_t i = 0; i < r.scores.size(); ++i) all.push_back({r.scores[i], r.true_positive[i]});
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<double> precision, recall;
  int tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].tp) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / num_gt);
  }

  if (method == ApMethod::ElevenPoint) {
    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double t = k / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= t) p = std::max(p, precision[i]);
      ap += p / 11.0;
    }
    return ap;
  }
  // All-point: area under the interpolated staircase, one recall step of
  // 1/num_gt per true positive.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].tp) ap += precision[i] / num_gt;
  return ap;
}

EvalReport mean_ap(std::span<const std::optional<double>> per_class_ap, const ClassSplit& split) {
  const auto n = static_cast<int>(split.base_ids().size() + split.novel_ids().size());
  if (static_cast<int>(per_class_ap.size()) != n)
    throw std::invalid_argument("mean_ap: expected AP for " + std::to_string(n) + " classes, got " +
                                std::to_string(per_class_ap.size()));
  EvalReport r;
  r.per_class_ap.assign(per_class_ap.begin(), per_class_ap.end());
  auto mean_of = [&](const std::vector<int>& ids) {
    double s = 0.0;
    int count = 0;
    for (int id : ids)
      if (per_class_ap[static_cast<std::size_t>(id)]) {
        s += *per_class_ap[static_cast<std::size_t>(id)];
        ++count;
      }
    return count ? s / count : 0.0;
  };
  r.base_mean = mean_of(split.base_ids());
  r.novel_mean = mean_of(split.novel_ids());
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  r.map = mean_of(all);
  return r;
}

EvalReport evaluate(std::span<const ImageResult> images, int num_classes, const ClassSplit& split,
                    double iou_threshold, ApMethod method) {
  std::vector<std::optional<double>> aps(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    std::vector<MatchResult> results;
    int num_gt = 0;
    for (const auto& img : images) {
      std::vector<ScoredBox> dets;
      for (const auto& d : img.detections)
        if (d.class_id == c) dets.push_back({d.box, d.score});
      std::vector<Box> gts;
      for (const auto& g : img.ground_truth)
        if (g.class_id == c) gts.push_back(g.box);
      num_gt += static_cast<int>(gts.size());
      results.push_back(match_detections(dets, gts, iou_threshold));
    }
    if (num_gt == 0) continue;
    aps[static_cast<std::size_t>(c)] = average_precision(results, num_gt, method);
  }
  auto report = mean_ap(aps, split);
  report.iou_threshold = iou_threshold;
  report.method = method;
  return report;
}

std::string format_report(const EvalReport& report, const Vocabulary& vocab, const ClassSplit& split) {
  auto cell = [&](int id) {
    const auto& ap = report.per_class_ap[static_cast<std::size_t>(id)];
    return ap ? fmt::format("{:>10.1f}", 100.0 * *ap) : fmt::format("{:>10}", "-");
  };
  std::string head = fmt::format("{:<6}", "class");
  std::string row = fmt::format("{:<6}", "AP");
  for (int id : split.novel_ids()) {
    head += fmt::format("{:>10}", vocab.name(id).substr(0, 9));
    row += cell(id);
  }
  head += fmt::format("{:>10}", "nmean");
  row += fmt::format("{:>10.1f}", 100.0 * report.novel_mean);
  for (int id : split.base_ids()) {
    head += fmt::format("{:>10}", vocab.name(id).substr(0, 9));
    row += cell(id);
  }
  head += fmt::format("{:>10}", "bmean");
  row += fmt::format("{:>10.1f}", 100.0 * report.base_mean);
  std::string out = fmt::format("IoU threshold {:.2f}, {} interpolation\n", report.iou_threshold,
                                report.method == ApMethod::ElevenPoint ? "11-point" : "all-point");
  return out + head + "\n" + row + "\n" + fmt::format("mAP {:.1f}\n", 100.0 * report.map);
}

std::string format_report_kv(const EvalReport& report, const Vocabulary& vocab, std::string_view prefix) {
  std::string out;
  for (int c = 0; c < vocab.size(); ++c) {
    const auto& ap = report.per_class_ap[static_cast<std::size_t>(c)];
    out += fmt::format("{}ap.{}={}\n", prefix, vocab.name(c), ap ? fmt::format("{:.6f}", *ap) : std::string("nan"));
  }
  out += fmt::format("{}mean.novel={:.6f}\n", prefix, report.novel_mean);
  out += fmt::format("{}mean.base={:.6f}\n", prefix, report.base_mean);
  out += fmt::format("{}map={:.6f}\n", prefix, report.map);
  out += fmt::format("{}iou={:.2f}\n", prefix, report.iou_threshold);
  return out;
}

}  // namespace websod::eval
