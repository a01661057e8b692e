#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "websod/attention.hpp"
#include "websod/box.hpp"
#include "websod/feature_map.hpp"
#include "websod/layers.hpp"
#include "websod/rfr_block.hpp"
#include "websod/tensor.hpp"

// Minimal two-stage detector: conv backbone, anchor-based proposal network,
// RoI max pooling and a per-class classification/regression head.
namespace websod::det {

struct DetectorConfig {
  int num_classes = 8;
  std::vector<int> backbone_channels{16, 32, 32, 32};
  std::vector<int> backbone_strides{1, 2, 2, 1};
  int rpn_channels = 32;
  std::vector<double> anchor_sizes{16.0, 26.0, 38.0};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // height / width
  int pool_size = 3;
  int fc_dim = 128;
  int cam_channels = 32;
  int pre_nms_top_n = 300;
  int proposals_top_n = 50;
  double proposal_nms_iou = 0.7;
  double detection_nms_iou = 0.3;
  double min_proposal_size = 4.0;
  std::array<double, 4> reg_weights{10.0, 10.0, 5.0, 5.0};

  int stride() const;
  int feature_channels() const { return backbone_channels.back(); }
  int num_anchors() const { return static_cast<int>(anchor_sizes.size() * anchor_ratios.size()); }
  int roi_feature_dim() const { return feature_channels() * pool_size * pool_size; }
  void validate() const;
};

/// All detector weights. Classifier rows: 0 = background, c + 1 = class c.
struct DetectorParams {
  DetectorConfig config;
  std::vector<nn::ConvLayer> backbone;
  nn::ConvLayer rpn_conv;
  nn::ConvLayer rpn_cls;
  nn::ConvLayer rpn_reg;
  nn::LinearLayer fc;
  nn::LinearLayer cls;
  nn::LinearLayer reg;
  attn::CamBranch cam;

  DetectorParams zeros_like() const;
};

DetectorParams init_detector(const DetectorConfig& config, std::uint64_t seed);

/// Visits every parameter tensor in a fixed order with a stable name.
template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    fn("backbone." + std::to_string(i) + ".weight", p.backbone[i].weight);
    fn("backbone." + std::to_string(i) + ".bias", p.backbone[i].bias);
  }
  fn(std::string("rpn.conv.weight"), p.rpn_conv.weight);
  fn(std::string("rpn.conv.bias"), p.rpn_conv.bias);
  fn(std::string("rpn.cls.weight"), p.rpn_cls.weight);
  fn(std::string("rpn.cls.bias"), p.rpn_cls.bias);
  fn(std::string("rpn.reg.weight"), p.rpn_reg.weight);
  fn(std::string("rpn.reg.bias"), p.rpn_reg.bias);
  fn(std::string("head.fc.weight"), p.fc.weight);
  fn(std::string("head.fc.bias"), p.fc.bias);
  fn(std::string("head.cls.weight"), p.cls.weight);
  fn(std::string("head.cls.bias"), p.cls.bias);
  fn(std::string("head.reg.weight"), p.reg.weight);
  fn(std::string("head.reg.bias"), p.reg.bias);
  fn(std::string("cam.conv.weight"), p.cam.conv.weight);
  fn(std::string("cam.conv.bias"), p.cam.conv.bias);
  fn(std::string("cam.fc.weight"), p.cam.classifier.weight);
  fn(std::string("cam.fc.bias"), p.cam.classifier.bias);
}

// ---- box parameterisation -------------------------------------------------

struct BoxDelta {
  double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;
};

BoxDelta encode_delta(const Box& proposal, const Box& target);
Box decode_delta(const Box& proposal, const BoxDelta& delta);

double smooth_l1(double x);
double smooth_l1_grad(double x);

/// -log(max(p[label], eps)). `p` must sum to 1 within 1e-6.
double cls_log_loss(std::span<const double> p, int label, double eps = 1e-12);

// ---- inference -------------------------------------------------------------

struct BackboneCache {
  std::vector<nn::ConvCache> convs;
  std::vector<Tensor> activations;  // post-ReLU output of every layer
};

FeatureMap extract_features(const Tensor& image, const DetectorParams& params, BackboneCache* cache = nullptr);

/// Anchors for an fh x fw feature grid, index ((y * fw) + x) * A + a.
std::vector<Box> make_anchors(const DetectorConfig& config, int fh, int fw);

struct RpnOutput {
  Tensor hidden;      // post-ReLU rpn conv
  Tensor objectness;  // A x H' x W' logits
  Tensor deltas;      // 4A x H' x W'
  nn::ConvCache conv_cache, cls_cache, reg_cache;
};

RpnOutput rpn_forward(const FeatureMap& fm, const DetectorParams& params);

/// Greedy NMS; ties in score broken by ascending index. Returns kept indices in
/// processing order.
std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

/// Objectness-ranked, clipped, NMS-filtered proposals; at most `top_n`.
std::vector<RoI> proposals_from_rpn(const RpnOutput& rpn, const DetectorConfig& config, int stride, int image_h,
                                    int image_w, int top_n);
std::vector<RoI> generate_proposals(const FeatureMap& fm, const DetectorParams& params, int image_h, int image_w);

struct HeadCache {
  Tensor pooled;  // N x D (RoI features after the optional refinement block)
  Tensor raw;     // N x D (RoI features before refinement)
  Tensor hidden;  // N x fc_dim, post-ReLU
  std::vector<nn::RoiPoolCache> pool;
  std::vector<rfr::RfrCache> rfr;
};

struct HeadOutput {
  Tensor logits;  // N x (C + 1)
  Tensor deltas;  // N x 4C, scaled by reg_weights
};

HeadOutput head_forward(const FeatureMap& fm, std::span<const Box> rois, const DetectorParams& params,
                        const rfr::RfrBlock* block, HeadCache* cache);

struct HeadGrads {
  DetectorParams* params = nullptr;  // receives fc/cls/reg gradients
  rfr::RfrBlock* block = nullptr;    // receives refinement gradients
  Tensor* features = nullptr;        // receives d/d(feature map)
};

void head_backward(const FeatureMap& fm, const DetectorParams& params, const rfr::RfrBlock* block,
                   const HeadCache& cache, const Tensor& grad_logits, const Tensor& grad_deltas,
                   const HeadGrads& grads);

/// Per-class NMS (detection_nms_iou) followed by score thresholding. The RoI
/// list is canonicalised first so the result does not depend on its order.
std::vector<Detection> detect_from_rois(const FeatureMap& fm, std::vector<RoI> rois, const DetectorParams& params,
                                        double score_threshold, int image_h, int image_w,
                                        const rfr::RfrBlock* block = nullptr);

std::vector<Detection> detect(const Tensor& image, const DetectorParams& params, double score_threshold,
                              const rfr::RfrBlock* block = nullptr);

}  // namespace websod::det
