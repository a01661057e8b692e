#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "websod/detector.hpp"
#include "websod/evaluation.hpp"
#include "websod/region_estimator.hpp"
#include "websod/training.hpp"

namespace websod::pipeline {

struct EvalSettings {
  double iou_threshold = 0.5;
  eval::ApMethod method = eval::ApMethod::ElevenPoint;
  double score_threshold = 0.01;  // detections below this are not scored
};

/// Every tunable of the pipeline. Loaded from an INI file; anything not given
/// keeps the default below, and `config_to_ini` echoes all effective values.
struct PipelineConfig {
  std::uint64_t seed = 1;  // parameter initialisation
  det::DetectorConfig detector;
  train::SamplingConfig sampling;
  train::LossSpec loss;
  region::EstimatorConfig estimator;
  int rfr_mid_channels = 16;
  train::Schedule base_train{.steps = 2000, .lr = 0.02, .seed = 11};
  train::Schedule web_train{.steps = 1200, .lr = 0.02, .seed = 12};
  train::Schedule rfr_train{.steps = 600, .lr = 0.02, .seed = 13};
  train::Schedule ft_train{.steps = 600, .lr = 0.02, .seed = 14};
  EvalSettings eval;

  void validate() const;
};

/// Rejects unknown sections/keys and malformed values with IngestionError.
PipelineConfig config_from_ini(const std::string& text, std::string_view source = "<memory>");
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_ini(const PipelineConfig& config);

std::string to_string(eval::ApMethod m);
std::string to_string(attn::SoftmaxAxis a);
std::string to_string(attn::RoiReduce r);

}  // namespace websod::pipeline
