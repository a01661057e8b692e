#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "websod/config.hpp"
#include "websod/datamodel.hpp"
#include "websod/evaluation.hpp"
#include "websod/region_estimator.hpp"
#include "websod/training.hpp"

// Experiment orchestration over a generated benchmark directory.
namespace websod::pipeline {

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StageId { BaseTrain, WebTrain, Rfr, FtBaseline };

std::string stage_name(StageId id);
StageId parse_stage(std::string_view name);

struct StageConfig {
  StageId stage = StageId::BaseTrain;
  std::filesystem::path bench_dir;
  PipelineConfig config;
  std::string target_split = "target-train";   // base_train: the annotated split to train on
  std::filesystem::path input_checkpoint;       // web_train: base detector; rfr / ft_baseline: web detector
  std::filesystem::path pseudo_annotations;     // web_train, rfr, ft_baseline
  std::filesystem::path output_checkpoint;
  std::filesystem::path report_path;            // defaults to <output>.report.txt
  bool attentive = true;                        // web_train: ACL on, otherwise the Base WebSOD variant
};

struct StageOutcome {
  std::string digest;
  double seconds = 0.0;
  train::TrainResult history;
};

/// Trains one stage and writes the checkpoint and a report. Missing inputs
/// raise StageError naming the stage that produces them.
StageOutcome run_stage(const StageConfig& cfg);

struct EstimateOutcome {
  std::vector<PseudoAnnotation> pseudo;
  std::optional<region::PseudoQuality> quality;  // when web-gt/ is present
  int images_with_boxes = 0;
};

EstimateOutcome run_estimate_regions(const std::filesystem::path& bench_dir, const std::filesystem::path& base_checkpoint,
                                     const PipelineConfig& config, const std::filesystem::path& output);

/// Evaluates a detector (plus an optional refinement block) on a target split.
eval::EvalReport run_eval(const std::filesystem::path& bench_dir, const std::filesystem::path& detector_checkpoint,
                          const std::optional<std::filesystem::path>& rfr_checkpoint, const EvalSettings& settings,
                          const std::string& split = "target-test");

struct AblationRow {
  std::string name;
  eval::EvalReport report;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  region::PseudoQuality pseudo_quality;
  int pseudo_images_with_boxes = 0;
  int web_images = 0;
  std::vector<std::pair<std::string, std::string>> digests;  // stage -> checkpoint digest
  std::string table;
};

/// Runs the whole ladder into `work_dir`: base detector, region estimation,
/// web detector without and with ACL, fine-tuning and refinement from the ACL
/// detector, and a fully supervised reference on target-full.
AblationResult run_ablation(const std::filesystem::path& bench_dir, const PipelineConfig& config,
                            const std::filesystem::path& work_dir);

std::string format_ablation(const AblationResult& result, const Vocabulary& vocab, const ClassSplit& split);

/// Grayscale CAM overlay for `class_id` at image resolution: 0.4 * luminance
/// plus 0.6 * the class-softmax attention map scaled to a maximum of 1.
Tensor cam_overlay(const Tensor& image, const det::DetectorParams& params, int class_id,
                   attn::SoftmaxAxis axis = attn::SoftmaxAxis::Spatial);

/// Vocabulary and split stored with the benchmark.
struct BenchmarkInfo {
  Vocabulary vocab;
  ClassSplit split;
};
BenchmarkInfo load_benchmark_info(const std::filesystem::path& bench_dir);

}  // namespace websod::pipeline
