#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "websod/attention.hpp"
#include "websod/detector.hpp"
#include "websod/rfr_block.hpp"

namespace websod::train {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One training image. Web images carry an image label; images without box
/// supervision only feed the image classification branch.
struct TrainSample {
  std::string image_id;
  const Tensor* image = nullptr;
  std::vector<GroundTruth> boxes;
  int image_label = -1;
  bool detector_supervision = true;
};

struct SamplingConfig {
  int rpn_batch = 64;
  double rpn_positive_fraction = 0.5;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;
  int roi_batch = 32;
  double roi_foreground_fraction = 0.25;
  double foreground_iou = 0.5;
  double background_iou = 0.3;
  int train_proposals = 64;
  int gt_jitter = 4;
};

/// Which loss terms are active for a stream.
struct LossSpec {
  bool attentive = false;  // ACL weights from the CAM, otherwise uniform
  bool image_cls = false;  // add lambda3 * L_Icls for labelled web images
  bool rpn = true;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  double rpn_weight = 1.0;
  attn::AttentionConfig attention;
};

/// Anchor and RoI samples for one image; fixed for the loss evaluation.
struct RoiPlan {
  std::vector<int> anchor_index;
  std::vector<int> anchor_label;  // 1 object, 0 background
  std::vector<std::array<double, 4>> anchor_target;
  std::vector<Box> rois;
  std::vector<int> roi_label;  // 0 background, c + 1 for class c
  std::vector<std::array<double, 4>> roi_target;  // scaled by reg_weights
  std::optional<std::vector<double>> fixed_attention;  // overrides the CAM-derived weights
};

/// Differentiable forward of backbone and proposal network.
struct Trunk {
  FeatureMap fm;
  det::BackboneCache backbone;
  det::RpnOutput rpn;
};

Trunk trunk_forward(const det::DetectorParams& params, const Tensor& image);

RoiPlan plan_rois(const Trunk& trunk, const det::DetectorParams& params, const TrainSample& sample,
                  const SamplingConfig& sampling, std::mt19937_64& rng);

struct LossBreakdown {
  double cls = 0.0;  // ACL, or plain mean log loss with uniform weights
  double reg = 0.0;
  double icls = 0.0;
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double total = 0.0;
  int num_rois = 0;
  std::vector<double> roi_weights;  // attention weight applied to each RoI
};

/// Loss of one image under a fixed plan. Gradients are accumulated into
/// `grads`/`block_grads` when non-null; `trunk_grads` controls whether they
/// flow into the backbone and proposal network.
LossBreakdown loss_and_grad(const det::DetectorParams& params, const rfr::RfrBlock* block, const Trunk& trunk,
                            const RoiPlan& plan, const TrainSample& sample, const LossSpec& spec,
                            det::DetectorParams* grads, rfr::RfrBlock* block_grads, bool trunk_grads);

/// ACL weights for RoIs of a web image: W_hat from the CAM of `image_label`
/// normalised over all RoIs of the image; background RoIs keep weight 1.
std::vector<double> attention_weights(const det::DetectorParams& params, const Tensor& cam_features,
                                      int stride, std::span<const Box> rois, std::span<const int> roi_labels,
                                      int image_label, const attn::AttentionConfig& cfg);

struct TrainableSet {
  bool backbone = true;
  bool rpn = true;
  bool head_hidden = true;  // fc layer feeding the box head
  bool head_out = true;     // Bbox Cls & Reg layers
  bool cam = true;
  bool rfr = false;

  static TrainableSet all_detector() { return {}; }
  static TrainableSet rfr_only() { return {false, false, false, false, false, true}; }
  static TrainableSet feature_layers() { return {true, false, true, false, false, false}; }
};

struct Schedule {
  int steps = 0;
  int batch_size = 4;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 10.0;
  int warmup_steps = 0;
  double lr_drop_fraction = 0.75;  // lr is multiplied by lr_drop_factor after this fraction of steps
  double lr_drop_factor = 0.1;
  std::uint64_t seed = 0;
};

struct Stream {
  std::string name;
  std::vector<TrainSample> samples;
  LossSpec spec;
};

struct StepRecord {
  int step = 0;
  std::string stream;
  LossBreakdown loss;  // batch mean before the update
};

struct TrainResult {
  std::vector<StepRecord> history;
};

/// Seeded SGD with momentum. With several streams, steps alternate strictly
/// between them (one mini-batch each). Only tensors in `trainable` change.
TrainResult train(det::DetectorParams& params, rfr::RfrBlock* block, std::span<const Stream> streams,
                  const TrainableSet& trainable, const SamplingConfig& sampling, const Schedule& schedule);

/// Sample indices used by stream-local batch `batch` (deterministic).
std::vector<int> batch_indices(std::size_t stream_size, int batch_size, int batch, std::uint64_t seed,
                               std::size_t stream_id);
/// RNG for sampling RoIs of image `index` at global step `step`.
std::mt19937_64 sample_rng(std::uint64_t seed, int step, int index);

/// Mean loss of a batch without updating anything (the quantity recorded in
/// the history before each step).
LossBreakdown batch_loss(const det::DetectorParams& params, const rfr::RfrBlock* block, const Stream& stream,
                         std::span<const int> indices, const SamplingConfig& sampling, std::uint64_t seed, int step,
                         det::DetectorParams* grads, rfr::RfrBlock* block_grads, bool trunk_grads);

/// Plain detector training on one stream, everything except a refinement block trainable.
TrainResult train_detector(det::DetectorParams& params, const Stream& stream, const SamplingConfig& sampling,
                           const Schedule& schedule);

}  // namespace websod::train
