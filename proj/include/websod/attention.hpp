#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "websod/feature_map.hpp"
#include "websod/layers.hpp"

// Class activation maps and the attentive classification loss.
namespace websod::attn {

/// Image-level classification branch on the shared backbone features:
/// conv + ReLU, global average pooling, then a linear classifier over the
/// foreground vocabulary (no background class).
struct CamBranch {
  nn::ConvLayer conv;
  nn::LinearLayer classifier;  // |classes| x K'

  int num_classes() const { return classifier.out_features; }
};

CamBranch make_cam_branch(int in_channels, int cam_channels, int num_classes);

/// Axis of the "class specific" softmax applied to the activation maps.
enum class SoftmaxAxis { Spatial, Classes };
/// Reduction used for the 1x1 RoI pooling on the attention map.
enum class RoiReduce { Max, Average };

struct AttentionConfig {
  double delta = 1e-8;
  SoftmaxAxis softmax_axis = SoftmaxAxis::Spatial;
  RoiReduce reduce = RoiReduce::Max;
};

struct CamOutput {
  std::vector<double> logits;  // |classes|
  Tensor features;             // f_k: K' x H' x W', post-ReLU
  std::vector<double> pooled;  // GAP(f_k)
  nn::ConvCache conv_cache;
};

CamOutput cam_forward(const FeatureMap& fm, const CamBranch& branch);

/// Backward of the image logits through GAP and the CAM conv. Accumulates into
/// `grads` and returns d(loss)/d(features of fm).
Tensor cam_backward(const FeatureMap& fm, const CamBranch& branch, const CamOutput& out,
                    std::span<const double> grad_logits, CamBranch* grads);

/// Cross entropy of softmax(logits) against `label`. `grad_logits`, when
/// non-null, receives softmax - onehot.
double image_cls_loss(std::span<const double> logits, int label, std::vector<double>* grad_logits = nullptr);

/// Per-class activation maps, |classes| x H' x W'.
struct AttentionMap {
  Tensor maps;
  bool normalized = false;

  int num_classes() const { return maps.dim(0); }
};

/// M_c(x,y) = sum_k w_k^c f_k(x,y). Returns a 1 x H' x W' map.
Tensor compute_cam(const Tensor& features, const nn::LinearLayer& classifier, int class_id);
/// All classes at once.
AttentionMap compute_cams(const Tensor& features, const nn::LinearLayer& classifier);

/// Softmax of each class map over its spatial cells (default), or across classes
/// at every cell.
AttentionMap class_softmax(const AttentionMap& m, SoftmaxAxis axis = SoftmaxAxis::Spatial);

/// W_RoI per RoI: reduction of M_{label(i)} over the cells covered by RoI i.
std::vector<double> roi_attention_pool(const AttentionMap& m, std::span<const Box> rois,
                                       std::span<const int> roi_labels, int stride,
                                       RoiReduce reduce = RoiReduce::Max);

struct RoiAttention {
  std::vector<double> raw;
  std::vector<double> normalized;
  double delta = 1e-8;
};

/// W_hat_i = W_i / (max_j W_j + delta).
RoiAttention normalize_attention(std::span<const double> w, double delta);

/// (1/N) sum_i w_hat_i * loss_i.
double acl(std::span<const double> cls_losses, std::span<const double> weights);

/// ACL over classifier logits (N x C+1 flattened row-major, labels in [0,C]).
/// Returns the loss; `grad_logits` (same layout) receives its gradient.
double acl_from_logits(std::span<const double> logits, int num_outputs, std::span<const int> labels,
                       std::span<const double> weights, std::vector<double>* grad_logits);

struct TotalLoss {
  double acl = 0.0;
  double reg = 0.0;
  double icls = 0.0;
  double total = 0.0;
};

/// lambda1 * acl + lambda2 * mean(reg_losses) + lambda3 * icls. `reg_losses`
/// has one entry per RoI (zero for background RoIs).
TotalLoss total_loss(double acl_value, std::span<const double> reg_losses, double icls_value, double lambda1,
                     double lambda2, double lambda3);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace websod::attn
