#pragma once

#include <optional>
#include <string>
#include <vector>

#include "websod/datamodel.hpp"
#include "websod/detector.hpp"
#include "websod/rfr_block.hpp"
#include "websod/training.hpp"

// Stage-3 domain refinement: the residual block (or the fine-tuning baseline)
// trained against a frozen web detector on alternating target/web batches.
namespace websod::rfr {

struct Stage3Data {
  std::vector<train::TrainSample> target;  // target-domain images with base classes only
  std::vector<train::TrainSample> web;     // web images with pseudo boxes
};

/// Loss settings per domain: target batches use plain detector losses, web
/// batches use the attentive classification loss.
struct Stage3Losses {
  train::LossSpec target;
  train::LossSpec web;

  static Stage3Losses standard(const train::LossSpec& base);
};

struct Stage3Result {
  train::TrainResult history;
  std::string frozen_digest_before;
  std::string frozen_digest_after;
};

class FrozenParameterViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trains only `block`; the detector is never modified. Steps alternate target,
/// web, target, web, ...
Stage3Result rfr_train(const det::DetectorParams& detector, RfrBlock& block, const Stage3Data& data,
                       const ClassSplit& split, const Stage3Losses& losses, const train::SamplingConfig& sampling,
                       const train::Schedule& schedule);

/// Fine-tuning baseline: backbone and the fc layer train, the Bbox Cls & Reg
/// layers (and proposal/CAM heads) stay frozen.
Stage3Result finetune_all(det::DetectorParams& detector, const Stage3Data& data, const ClassSplit& split,
                          const Stage3Losses& losses, const train::SamplingConfig& sampling,
                          const train::Schedule& schedule);

/// Digest of the Bbox Cls & Reg layers only.
std::string head_digest(const det::DetectorParams& params);

/// Deployable detector: the web detector with an optional refinement block
/// between RoI pooling and the head.
class FinalDetector {
 public:
  FinalDetector(det::DetectorParams params, std::optional<RfrBlock> block);

  std::vector<Detection> detect(const Tensor& image, double score_threshold) const;
  const det::DetectorParams& params() const { return params_; }
  const RfrBlock* block() const { return block_ ? &*block_ : nullptr; }

 private:
  det::DetectorParams params_;
  std::optional<RfrBlock> block_;
};

FinalDetector assemble_final_detector(const det::DetectorParams& web_params, const RfrBlock& block);

}  // namespace websod::rfr
