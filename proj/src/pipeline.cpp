#include "websod/pipeline.hpp"

#include <chrono>
#include <iostream>
#include <map>

#include <fmt/format.h>

#include "websod/checkpoint.hpp"
#include "websod/rfr.hpp"
#include "websod/synthetic.hpp"

namespace websod::pipeline {
namespace fs = std::filesystem;

std::string stage_name(StageId id) {
  switch (id) {
    case StageId::BaseTrain: return "base_train";
    case StageId::WebTrain: return "web_train";
    case StageId::Rfr: return "rfr";
    case StageId::FtBaseline: return "ft_baseline";
  }
  return "?";
}

StageId parse_stage(std::string_view name) {
  for (StageId id : {StageId::BaseTrain, StageId::WebTrain, StageId::Rfr, StageId::FtBaseline})
    if (stage_name(id) == name) return id;
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

BenchmarkInfo load_benchmark_info(const fs::path& bench_dir) {
  if (!fs::exists(bench_dir / "benchmark.ini"))
    throw StageError("'" + bench_dir.string() + "' is not a benchmark directory (run gen-bench first)");
  const auto spec = synth::load_benchmark_spec(bench_dir);
  return {spec.vocabulary(), spec.split()};
}

namespace {

using Clock = std::chrono::steady_clock;

void require(const fs::path& path, StageId stage, const std::string& producer) {
  if (path.empty() || !fs::exists(path))
    throw StageError(stage_name(stage) + " requires the " + producer + " output '" + path.string() +
                     "' (run " + producer + " first)");
}

std::vector<train::TrainSample> target_samples(const std::vector<TargetImageRecord>& records) {
  std::vector<train::TrainSample> out;
  for (const auto& r : records) out.push_back({r.image_id, &r.image, r.objects, -1, true});
  return out;
}

std::vector<train::TrainSample> web_samples(const std::vector<WebImageRecord>& web,
                                            const std::vector<PseudoAnnotation>& pseudo, bool boxed_only) {
  std::map<std::string, const PseudoAnnotation*> by_id;
  for (const auto& p : pseudo) by_id[p.image_id] = &p;
  std::vector<train::TrainSample> out;
  for (const auto& w : web) {
    auto it = by_id.find(w.image_id);
    if (it == by_id.end()) throw StageError("no pseudo annotation for web image '" + w.image_id + "'");
    if (it->second->image_label != w.image_label)
      throw StageError("pseudo annotation label disagrees with the manifest for '" + w.image_id + "'");
    std::vector<GroundTruth> boxes;
    for (const auto& b : it->second->boxes) boxes.push_back({b.box, b.class_id});
    if (boxed_only && boxes.empty()) continue;
    const bool supervised = !boxes.empty();
    out.push_back({w.image_id, &w.image, std::move(boxes), w.image_label, supervised});
  }
  return out;
}

std::string spec_lines(const std::string& stream, const train::LossSpec& s) {
  return fmt::format(
      "stream.{0}.attentive = {1}\nstream.{0}.image_cls = {2}\nstream.{0}.rpn = {3}\n", stream, s.attentive,
      s.image_cls, s.rpn);
}

void write_report(const StageConfig& cfg, const StageOutcome& outcome, const std::string& header_extra) {
  std::string r = "[stage]\n";
  r += "name = " + stage_name(cfg.stage) + "\n";
  r += "benchmark = " + cfg.bench_dir.string() + "\n";
  if (cfg.stage == StageId::BaseTrain) r += "target_split = " + cfg.target_split + "\n";
  if (!cfg.input_checkpoint.empty()) r += "input_checkpoint = " + cfg.input_checkpoint.string() + "\n";
  if (!cfg.pseudo_annotations.empty()) r += "pseudo_annotations = " + cfg.pseudo_annotations.string() + "\n";
  if (cfg.stage == StageId::WebTrain) r += fmt::format("attentive = {}\n", cfg.attentive);
  r += header_extra;
  r += "output_checkpoint = " + cfg.output_checkpoint.string() + "\n";
  r += "digest = " + outcome.digest + "\n";
  r += fmt::format("seconds = {:.3f}\n", outcome.seconds);
  r += fmt::format("steps = {}\n", outcome.history.history.size());
  if (!outcome.history.history.empty()) r += fmt::format("final_loss = {:.6f}\n", outcome.history.history.back().loss.total);
  r += "\n" + config_to_ini(cfg.config);
  r += "\n[history]\n# step stream total cls reg icls rpn_cls rpn_reg\n";
  for (const auto& h : outcome.history.history)
    r += fmt::format("{} {} {:.6f} {:.6f} {:.6f} {:.6f} {:.6f} {:.6f}\n", h.step, h.stream, h.loss.total, h.loss.cls,
                     h.loss.reg, h.loss.icls, h.loss.rpn_cls, h.loss.rpn_reg);
  const fs::path path = cfg.report_path.empty() ? fs::path(cfg.output_checkpoint.string() + ".report.txt") : cfg.report_path;
  write_text_file(path, r);
}

det::DetectorConfig detector_config(const PipelineConfig& config, const Vocabulary& vocab) {
  auto d = config.detector;
  d.num_classes = vocab.size();
  return d;
}

}  // namespace

StageOutcome run_stage(const StageConfig& cfg) {
  cfg.config.validate();
  if (cfg.output_checkpoint.empty()) throw StageError(stage_name(cfg.stage) + ": no output checkpoint given");
  const auto info = load_benchmark_info(cfg.bench_dir);
  const auto t0 = Clock::now();
  StageOutcome outcome;
  std::string extra;
  if (!cfg.output_checkpoint.parent_path().empty()) fs::create_directories(cfg.output_checkpoint.parent_path());

  switch (cfg.stage) {
    case StageId::BaseTrain: {
      const fs::path split_dir = cfg.bench_dir / cfg.target_split;
      if (!fs::exists(split_dir)) throw StageError("base_train: split '" + split_dir.string() + "' not found");
      const auto records = load_target_split(split_dir, info.vocab);
      auto params = init_detector(detector_config(cfg.config, info.vocab), cfg.config.seed);
      train::LossSpec spec = cfg.config.loss;
      spec.attentive = false;
      spec.image_cls = false;
      const train::Stream stream{"target", target_samples(records), spec};
      outcome.history = train::train_detector(params, stream, cfg.config.sampling, cfg.config.base_train);
      save_detector(cfg.output_checkpoint, params);
      outcome.digest = digest(params);
      extra = spec_lines("target", spec);
      break;
    }
    case StageId::WebTrain: {
      require(cfg.input_checkpoint, cfg.stage, "base_train");
      require(cfg.pseudo_annotations, cfg.stage, "estimate-regions");
      auto params = load_detector(cfg.input_checkpoint);
      if (params.config.num_classes != info.vocab.size())
        throw StageError("web_train: base checkpoint class count does not match the benchmark");
      const auto web = load_web_split(cfg.bench_dir / "web-train", info.vocab);
      const auto pseudo = region::read_pseudo_annotations(read_text_file(cfg.pseudo_annotations), info.vocab);
      train::LossSpec spec = cfg.config.loss;
      spec.attentive = cfg.attentive;
      spec.image_cls = true;
      const train::Stream stream{"web", web_samples(web, pseudo, false), spec};
      outcome.history = train::train_detector(params, stream, cfg.config.sampling, cfg.config.web_train);
      save_detector(cfg.output_checkpoint, params);
      outcome.digest = digest(params);
      extra = spec_lines("web", spec);
      break;
    }
    case StageId::Rfr:
    case StageId::FtBaseline: {
      require(cfg.input_checkpoint, cfg.stage, "web_train");
      require(cfg.pseudo_annotations, cfg.stage, "estimate-regions");
      auto params = load_detector(cfg.input_checkpoint);
      const auto records = load_target_split(cfg.bench_dir / cfg.target_split, info.vocab);
      const auto web = load_web_split(cfg.bench_dir / "web-train", info.vocab);
      const auto pseudo = region::read_pseudo_annotations(read_text_file(cfg.pseudo_annotations), info.vocab);
      const rfr::Stage3Data data{target_samples(records), web_samples(web, pseudo, true)};
      const auto losses = rfr::Stage3Losses::standard(cfg.config.loss);
      extra = spec_lines("target", losses.target) + spec_lines("web", losses.web);
      if (cfg.stage == StageId::Rfr) {
        auto block = rfr::make_rfr_block(params.config.feature_channels(), cfg.config.rfr_mid_channels, cfg.config.seed);
        auto r = rfr::rfr_train(params, block, data, info.split, losses, cfg.config.sampling, cfg.config.rfr_train);
        outcome.history = std::move(r.history);
        save_rfr(cfg.output_checkpoint, block);
        outcome.digest = digest(block);
        extra += "frozen_detector_digest = " + r.frozen_digest_after + "\n";
      } else {
        auto r = rfr::finetune_all(params, data, info.split, losses, cfg.config.sampling, cfg.config.ft_train);
        outcome.history = std::move(r.history);
        save_detector(cfg.output_checkpoint, params);
        outcome.digest = digest(params);
        extra += "frozen_head_digest = " + r.frozen_digest_after + "\n";
      }
      break;
    }
  }
  outcome.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  write_report(cfg, outcome, extra);
  return outcome;
}

EstimateOutcome run_estimate_regions(const fs::path& bench_dir, const fs::path& base_checkpoint,
                                     const PipelineConfig& config, const fs::path& output) {
  require(base_checkpoint, StageId::WebTrain, "base_train");
  const auto info = load_benchmark_info(bench_dir);
  const auto params = load_detector(base_checkpoint);
  const auto web = load_web_split(bench_dir / "web-train", info.vocab);
  EstimateOutcome out;
  for (const auto& w : web) {
    auto p = region::estimate_regions(w, params, config.estimator);
    p.validate(config.estimator.score_threshold);
    out.images_with_boxes += !p.boxes.empty();
    out.pseudo.push_back(std::move(p));
  }
  if (!output.parent_path().empty()) fs::create_directories(output.parent_path());
  write_text_file(output, region::write_pseudo_annotations(out.pseudo, info.vocab));

  // Diagnostics only: hidden boxes live in a separate directory that training never reads.
  const fs::path gt_dir = bench_dir / "web-gt";
  if (fs::exists(gt_dir)) {
    std::map<std::string, std::vector<GroundTruth>> gt_by_id;
    for (auto& [id, ann] : load_annotation_dir(gt_dir, info.vocab)) gt_by_id[id] = std::move(ann.objects);
    std::vector<std::vector<GroundTruth>> gts;
    for (const auto& p : out.pseudo) gts.push_back(gt_by_id[p.image_id]);
    out.quality = region::pseudo_label_quality(out.pseudo, gts);
  }
  return out;
}

eval::EvalReport run_eval(const fs::path& bench_dir, const fs::path& detector_checkpoint,
                          const std::optional<fs::path>& rfr_checkpoint, const EvalSettings& settings,
                          const std::string& split) {
  const auto info = load_benchmark_info(bench_dir);
  if (!fs::exists(detector_checkpoint)) throw StageError("detector checkpoint '" + detector_checkpoint.string() + "' not found");
  auto params = load_detector(detector_checkpoint);
  if (params.config.num_classes != info.vocab.size())
    throw StageError("checkpoint class count does not match the benchmark vocabulary");
  std::optional<rfr::RfrBlock> block;
  if (rfr_checkpoint) {
    if (!fs::exists(*rfr_checkpoint)) throw StageError("refinement checkpoint '" + rfr_checkpoint->string() + "' not found");
    block = load_rfr(*rfr_checkpoint);
  }
  const rfr::FinalDetector detector(std::move(params), std::move(block));
  const auto records = load_target_split(bench_dir / split, info.vocab);
  std::vector<eval::ImageResult> results;
  for (const auto& r : records) results.push_back({detector.detect(r.image, settings.score_threshold), r.objects});
  auto report = eval::evaluate(results, info.vocab.size(), info.split, settings.iou_threshold, settings.method);
  for (std::size_t c = 0; c < report.per_class_ap.size(); ++c)
    if (!report.per_class_ap[c])
      std::cerr << "warning: class '" << info.vocab.name(static_cast<int>(c)) << "' has no ground truth in " << split
                << " and is left out of the means\n";
  return report;
}

AblationResult run_ablation(const fs::path& bench_dir, const PipelineConfig& config, const fs::path& work_dir) {
  const auto info = load_benchmark_info(bench_dir);
  if (!fs::exists(bench_dir / "target-full"))
    throw StageError("ablate needs the target-full split for the fully supervised row");
  fs::create_directories(work_dir);
  AblationResult result;

  auto stage = [&](StageId id, const std::string& out, auto&& customise) {
    StageConfig s;
    s.stage = id;
    s.bench_dir = bench_dir;
    s.config = config;
    s.output_checkpoint = work_dir / out;
    s.pseudo_annotations = work_dir / "pseudo.jsonl";
    customise(s);
    const auto o = run_stage(s);
    result.digests.emplace_back(out, o.digest);
  };

  stage(StageId::BaseTrain, "base.ckpt", [](StageConfig& s) { s.pseudo_annotations.clear(); });
  const auto est = run_estimate_regions(bench_dir, work_dir / "base.ckpt", config, work_dir / "pseudo.jsonl");
  result.pseudo_quality = est.quality.value_or(region::PseudoQuality{});
  result.pseudo_images_with_boxes = est.images_with_boxes;
  result.web_images = static_cast<int>(est.pseudo.size());
  result.digests.emplace_back("pseudo.jsonl", sha256_hex(read_text_file(work_dir / "pseudo.jsonl")));

  stage(StageId::WebTrain, "web_base.ckpt", [&](StageConfig& s) {
    s.input_checkpoint = work_dir / "base.ckpt";
    s.attentive = false;
  });
  stage(StageId::WebTrain, "web_acl.ckpt", [&](StageConfig& s) {
    s.input_checkpoint = work_dir / "base.ckpt";
    s.attentive = true;
  });
  stage(StageId::FtBaseline, "web_acl_ft.ckpt", [&](StageConfig& s) { s.input_checkpoint = work_dir / "web_acl.ckpt"; });
  stage(StageId::Rfr, "rfr.ckpt", [&](StageConfig& s) { s.input_checkpoint = work_dir / "web_acl.ckpt"; });
  stage(StageId::BaseTrain, "full.ckpt", [](StageConfig& s) {
    s.target_split = "target-full";
    s.pseudo_annotations.clear();
  });

  const auto& e = config.eval;
  result.rows.push_back({"Base WebSOD", run_eval(bench_dir, work_dir / "web_base.ckpt", std::nullopt, e)});
  result.rows.push_back({"+ACL", run_eval(bench_dir, work_dir / "web_acl.ckpt", std::nullopt, e)});
  result.rows.push_back({"+ACL+FT", run_eval(bench_dir, work_dir / "web_acl_ft.ckpt", std::nullopt, e)});
  result.rows.push_back({"+ACL+RFR", run_eval(bench_dir, work_dir / "web_acl.ckpt", work_dir / "rfr.ckpt", e)});
  result.rows.push_back({"Fully Supervised", run_eval(bench_dir, work_dir / "full.ckpt", std::nullopt, e)});

  result.table = format_ablation(result, info.vocab, info.split);
  write_text_file(work_dir / "ablation.txt", result.table);
  return result;
}

Tensor cam_overlay(const Tensor& image, const det::DetectorParams& params, int class_id, attn::SoftmaxAxis axis) {
  if (class_id < 0 || class_id >= params.config.num_classes) throw std::invalid_argument("cam_overlay: class out of range");
  const auto fm = det::extract_features(image, params);
  const auto cam = attn::cam_forward(fm, params.cam);
  const auto att = attn::class_softmax(attn::compute_cams(cam.features, params.cam.classifier), axis);
  const int fh = att.maps.dim(1), fw = att.maps.dim(2), h = image.dim(1), w = image.dim(2);
  double peak = 0.0;
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x) peak = std::max(peak, att.maps.at(class_id, y, x));
  Tensor out({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = att.maps.at(class_id, std::min(y / fm.stride, fh - 1), std::min(x / fm.stride, fw - 1));
      const double lum = 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
      out.at(0, y, x) = 0.4 * lum + 0.6 * (peak > 0 ? a / peak : 0.0);
    }
  return out;
}

std::string format_ablation(const AblationResult& result, const Vocabulary& vocab, const ClassSplit& split) {
  std::string t = fmt::format("{:<18}", "variant");
  for (int c : split.novel_ids()) t += fmt::format(" {:>9}", vocab.name(c));
  t += fmt::format(" {:>10} {:>10} {:>8}\n", "novel_mean", "base_mean", "mAP");
  for (const auto& row : result.rows) {
    t += fmt::format("{:<18}", row.name);
    for (int c : split.novel_ids()) {
      const auto& ap = row.report.per_class_ap[static_cast<std::size_t>(c)];
      t += ap ? fmt::format(" {:>9.4f}", *ap) : fmt::format(" {:>9}", "-");
    }
    t += fmt::format(" {:>10.4f} {:>10.4f} {:>8.4f}\n", row.report.novel_mean, row.report.base_mean, row.report.map);
  }
  const auto& q = result.pseudo_quality;
  t += "\n[pseudo_labels]\n";
  t += fmt::format("web_images = {}\nimages_with_boxes = {}\nboxes = {}\n", result.web_images,
                   result.pseudo_images_with_boxes, q.num_pseudo);
  t += q.precision_defined ? fmt::format("precision = {:.4f}\n", q.precision) : "precision = undefined\n";
  t += fmt::format("recall = {:.4f}\n", q.recall);
  t += "\n[results]\n";
  for (const auto& row : result.rows) {
    std::string key = row.name;
    for (auto& ch : key)
      if (ch == ' ' || ch == '+') ch = '_';
    t += fmt::format("{}.novel_mean = {:.6f}\n{}.base_mean = {:.6f}\n", key, row.report.novel_mean, key,
                     row.report.base_mean);
  }
  t += "\n[digests]\n";
  for (const auto& [name, d] : result.digests) t += name + " = " + d + "\n";
  return t;
}

}  // namespace websod::pipeline
