#include "websod/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace websod {

nn::CellRange covered_cells(const Box& box, int stride, int fh, int fw) {
  const double s = static_cast<double>(stride);
  int x0 = std::clamp(static_cast<int>(std::floor(box.x1() / s)), 0, fw);
  int x1 = std::clamp(static_cast<int>(std::ceil(box.x2() / s)), 0, fw);
  int y0 = std::clamp(static_cast<int>(std::floor(box.y1() / s)), 0, fh);
  int y1 = std::clamp(static_cast<int>(std::ceil(box.y2() / s)), 0, fh);
  if (x1 <= x0) {
    x0 = std::clamp(static_cast<int>(std::floor(box.center_x() / s)), 0, fw - 1);
    x1 = x0 + 1;
  }
  if (y1 <= y0) {
    y0 = std::clamp(static_cast<int>(std::floor(box.center_y() / s)), 0, fh - 1);
    y1 = y0 + 1;
  }
  return {x0, y0, x1, y1};
}

}  // namespace websod

namespace websod::attn {

CamBranch make_cam_branch(int in_channels, int cam_channels, int num_classes) {
  return {nn::ConvLayer(in_channels, cam_channels, 3, 1, 1), nn::LinearLayer(cam_channels, num_classes)};
}

CamOutput cam_forward(const FeatureMap& fm, const CamBranch& branch) {
  if (fm.channels() != branch.conv.in_channels)
    throw std::invalid_argument("cam_forward: feature map has " + std::to_string(fm.channels()) +
                                " channels, branch expects " + std::to_string(branch.conv.in_channels));
  CamOutput out;
  out.features = nn::conv_forward(branch.conv, fm.data, &out.conv_cache);
  nn::relu_inplace(out.features);
  const int k = out.features.dim(0);
  const int cells = out.features.dim(1) * out.features.dim(2);
  out.pooled.assign(static_cast<std::size_t>(k), 0.0);
  for (int c = 0; c < k; ++c) {
    double s = 0.0;
    for (int i = 0; i < cells; ++i) s += out.features.data[static_cast<std::size_t>(c * cells + i)];
    out.pooled[static_cast<std::size_t>(c)] = s / cells;
  }
  Tensor pooled({1, k});
  pooled.data = out.pooled;
  out.logits = nn::linear_forward(branch.classifier, pooled).data;
  return out;
}

Tensor cam_backward(const FeatureMap& fm, const CamBranch& branch, const CamOutput& out,
                    std::span<const double> grad_logits, CamBranch* grads) {
  const int k = out.features.dim(0);
  const int cells = out.features.dim(1) * out.features.dim(2);
  Tensor pooled({1, k});
  pooled.data = out.pooled;
  Tensor g_logits({1, branch.num_classes()});
  std::copy(grad_logits.begin(), grad_logits.end(), g_logits.data.begin());
  Tensor g_pooled =
      nn::linear_backward(branch.classifier, pooled, g_logits, grads ? &grads->classifier : nullptr, true);
  Tensor g_feat = out.features.zeros_like();
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < cells; ++i)
      g_feat.data[static_cast<std::size_t>(c * cells + i)] = g_pooled.data[static_cast<std::size_t>(c)] / cells;
  nn::relu_backward_inplace(out.features, g_feat);
  (void)fm;
  return nn::conv_backward(branch.conv, out.conv_cache, g_feat, grads ? &grads->conv : nullptr, true);
}

double image_cls_loss(std::span<const double> logits, int label, std::vector<double>* grad_logits) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw std::out_of_range("image label " + std::to_string(label) + " out of range");
  const double lse = nn::log_sum_exp(logits);
  if (grad_logits) {
    *grad_logits = nn::softmax(logits);
    (*grad_logits)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

Tensor compute_cam(const Tensor& features, const nn::LinearLayer& classifier, int class_id) {
  if (class_id < 0 || class_id >= classifier.out_features)
    throw std::out_of_range("compute_cam: class " + std::to_string(class_id) + " out of range");
  const int k = features.dim(0);
  if (k != classifier.in_features) throw std::invalid_argument("compute_cam: channel mismatch");
  const int h = features.dim(1), w = features.dim(2);
  Tensor m({1, h, w});
  for (int c = 0; c < k; ++c) {
    const double wk = classifier.weight.data[static_cast<std::size_t>(class_id * k + c)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) m.at(0, y, x) += wk * features.at(c, y, x);
  }
  return m;
}

AttentionMap compute_cams(const Tensor& features, const nn::LinearLayer& classifier) {
  const int h = features.dim(1), w = features.dim(2);
  AttentionMap out{Tensor({classifier.out_features, h, w}), false};
  const std::size_t cells = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < classifier.out_features; ++c) {
    Tensor m = compute_cam(features, classifier, c);
    std::copy(m.data.begin(), m.data.end(), out.maps.data.begin() + static_cast<std::ptrdiff_t>(c * cells));
  }
  return out;
}

AttentionMap class_softmax(const AttentionMap& m, SoftmaxAxis axis) {
  AttentionMap out{m.maps, true};
  const int classes = m.maps.dim(0);
  const std::size_t cells = static_cast<std::size_t>(m.maps.dim(1)) * m.maps.dim(2);
  if (axis == SoftmaxAxis::Spatial) {
    for (int c = 0; c < classes; ++c) {
      std::span<const double> row(m.maps.data.data() + c * cells, cells);
      auto p = nn::softmax(row);
      std::copy(p.begin(), p.end(), out.maps.data.begin() + static_cast<std::ptrdiff_t>(c * cells));
    }
  } else {
    std::vector<double> column(static_cast<std::size_t>(classes));
    for (std::size_t i = 0; i < cells; ++i) {
      for (int c = 0; c < classes; ++c) column[static_cast<std::size_t>(c)] = m.maps.data[c * cells + i];
      auto p = nn::softmax(column);
      for (int c = 0; c < classes; ++c) out.maps.data[c * cells + i] = p[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

std::vector<double> roi_attention_pool(const AttentionMap& m, std::span<const Box> rois,
                                       std::span<const int> roi_labels, int stride, RoiReduce reduce) {
  if (rois.size() != roi_labels.size()) throw std::invalid_argument("roi_attention_pool: label count mismatch");
  const int h = m.maps.dim(1), w = m.maps.dim(2);
  std::vector<double> out;
  out.reserve(rois.size());
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const int c = roi_labels[i];
    if (c < 0 || c >= m.num_classes()) throw std::out_of_range("roi_attention_pool: label out of range");
    const auto cells = covered_cells(rois[i], stride, h, w);
    double best = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (int y = cells.y0; y < cells.y1; ++y)
      for (int x = cells.x0; x < cells.x1; ++x) {
        const double v = m.maps.at(c, y, x);
        best = std::max(best, v);
        sum += v;
      }
    const int n = (cells.x1 - cells.x0) * (cells.y1 - cells.y0);
    out.push_back(reduce == RoiReduce::Max ? best : sum / n);
  }
  return out;
}

RoiAttention normalize_attention(std::span<const double> w, double delta) {
  if (w.empty()) throw std::invalid_argument("normalize_attention: no RoIs");
  if (!(delta > 0.0)) throw std::invalid_argument("normalize_attention: delta must be positive");
  RoiAttention out;
  out.raw.assign(w.begin(), w.end());
  out.delta = delta;
  const double denom = *std::max_element(w.begin(), w.end()) + delta;
  out.normalized.reserve(w.size());
  for (double v : w) {
    if (v < 0.0) throw std::invalid_argument("normalize_attention: negative attention score");
    out.normalized.push_back(v / denom);
  }
  return out;
}

double acl(std::span<const double> cls_losses, std::span<const double> weights) {
  if (cls_losses.size() != weights.size())
    throw std::invalid_argument("acl: " + std::to_string(cls_losses.size()) + " losses but " +
                                std::to_string(weights.size()) + " weights");
  if (cls_losses.empty()) throw std::invalid_argument("acl: no RoIs");
  double s = 0.0;
  for (std::size_t i = 0; i < cls_losses.size(); ++i) s += weights[i] * cls_losses[i];
  return s / static_cast<double>(cls_losses.size());
}

double acl_from_logits(std::span<const double> logits, int num_outputs, std::span<const int> labels,
                       std::span<const double> weights, std::vector<double>* grad_logits) {
  const std::size_t n = labels.size();
  if (logits.size() != n * static_cast<std::size_t>(num_outputs) || weights.size() != n)
    throw std::invalid_argument("acl_from_logits: size mismatch");
  std::vector<double> losses(n);
  if (grad_logits) grad_logits->assign(logits.size(), 0.0);
  std::vector<double> g;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.subspan(i * static_cast<std::size_t>(num_outputs), static_cast<std::size_t>(num_outputs));
    losses[i] = image_cls_loss(row, labels[i], grad_logits ? &g : nullptr);
    if (grad_logits) {
      const double scale = weights[i] / static_cast<double>(n);
      for (int j = 0; j < num_outputs; ++j)
        (*grad_logits)[i * static_cast<std::size_t>(num_outputs) + static_cast<std::size_t>(j)] =
            scale * g[static_cast<std::size_t>(j)];
    }
  }
  return acl(losses, weights);
}

TotalLoss total_loss(double acl_value, std::span<const double> reg_losses, double icls_value, double lambda1,
                     double lambda2, double lambda3) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss component: ") + name);
  };
  check(acl_value, "acl");
  check(icls_value, "icls");
  double reg = 0.0;
  for (double r : reg_losses) reg += r;
  check(reg, "reg");
  if (!reg_losses.empty()) reg /= static_cast<double>(reg_losses.size());
  TotalLoss t;
  t.acl = acl_value;
  t.reg = reg;
  t.icls = icls_value;
  t.total = lambda1 * acl_value + lambda2 * reg + lambda3 * icls_value;
  return t;
}

}  // namespace websod::attn
