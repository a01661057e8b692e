#include "websod/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <tuple>

namespace websod::det {
namespace {

constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

int DetectorConfig::stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void DetectorConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("detector needs at least one class");
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size())
    throw std::invalid_argument("backbone channels and strides must be non-empty and of equal length");
  if (anchor_sizes.empty() || anchor_ratios.empty()) throw std::invalid_argument("no anchors configured");
  if (pool_size < 1 || fc_dim < 1 || cam_channels < 1 || rpn_channels < 1)
    throw std::invalid_argument("layer widths must be positive");
  if (proposals_top_n < 1 || pre_nms_top_n < 1) throw std::invalid_argument("proposal counts must be positive");
}

DetectorParams DetectorParams::zeros_like() const {
  DetectorParams z = *this;
  for_each_tensor(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

DetectorParams init_detector(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DetectorParams p;
  p.config = config;
  int in = 3;
  for (std::size_t i = 0; i < config.backbone_channels.size(); ++i) {
    p.backbone.emplace_back(in, config.backbone_channels[i], 3, config.backbone_strides[i], 1);
    nn::he_init(p.backbone.back(), rng);
    in = config.backbone_channels[i];
  }
  const int k = config.feature_channels();
  const int a = config.num_anchors();
  p.rpn_conv = nn::ConvLayer(k, config.rpn_channels, 3, 1, 1);
  nn::he_init(p.rpn_conv, rng);
  p.rpn_cls = nn::ConvLayer(config.rpn_channels, a, 1, 1, 0);
  nn::normal_init(p.rpn_cls, rng, 0.01);
  p.rpn_reg = nn::ConvLayer(config.rpn_channels, 4 * a, 1, 1, 0);
  nn::normal_init(p.rpn_reg, rng, 0.01);
  p.fc = nn::LinearLayer(config.roi_feature_dim(), config.fc_dim);
  nn::he_init(p.fc, rng);
  p.cls = nn::LinearLayer(config.fc_dim, config.num_classes + 1);
  nn::normal_init(p.cls, rng, 0.01);
  p.reg = nn::LinearLayer(config.fc_dim, 4 * config.num_classes);
  nn::normal_init(p.reg, rng, 0.001);
  p.cam = attn::make_cam_branch(k, config.cam_channels, config.num_classes);
  nn::he_init(p.cam.conv, rng);
  nn::normal_init(p.cam.classifier, rng, 0.01);
  return p;
}

BoxDelta encode_delta(const Box& proposal, const Box& target) {
  return {(target.center_x() - proposal.center_x()) / proposal.width(),
          (target.center_y() - proposal.center_y()) / proposal.height(),
          std::log(target.width() / proposal.width()), std::log(target.height() / proposal.height())};
}

Box decode_delta(const Box& proposal, const BoxDelta& d) {
  const double cx = d.tx * proposal.width() + proposal.center_x();
  const double cy = d.ty * proposal.height() + proposal.center_y();
  const double w = proposal.width() * std::exp(std::min(d.tw, kMaxLogScale));
  const double h = proposal.height() * std::exp(std::min(d.th, kMaxLogScale));
  return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

double smooth_l1_grad(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

double cls_log_loss(std::span<const double> p, int label, double eps) {
  if (label < 0 || label >= static_cast<int>(p.size())) throw std::out_of_range("cls_log_loss: label out of range");
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("cls_log_loss: probabilities do not sum to 1");
  return -std::log(std::max(p[static_cast<std::size_t>(label)], eps));
}

FeatureMap extract_features(const Tensor& image, const DetectorParams& params, BackboneCache* cache) {
  const int stride = params.config.stride();
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("image must be 3 x H x W");
  if (image.dim(1) < stride || image.dim(2) < stride)
    throw std::invalid_argument("image smaller than the backbone stride");
  if (!all_finite(image)) throw std::invalid_argument("image contains non-finite values");
  if (cache) {
    cache->convs.assign(params.backbone.size(), {});
    cache->activations.clear();
  }
  Tensor x = image;
  for (std::size_t i = 0; i < params.backbone.size(); ++i) {
    x = nn::conv_forward(params.backbone[i], x, cache ? &cache->convs[i] : nullptr);
    nn::relu_inplace(x);
    if (cache) cache->activations.push_back(x);
  }
  return {std::move(x), stride};
}

std::vector<Box> make_anchors(const DetectorConfig& config, int fh, int fw) {
  const double s = config.stride();
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(fh) * fw * config.num_anchors());
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x) {
      const double cx = (x + 0.5) * s;
      const double cy = (y + 0.5) * s;
      for (double size : config.anchor_sizes)
        for (double ratio : config.anchor_ratios) {
          const double w = size / std::sqrt(ratio);
          const double h = size * std::sqrt(ratio);
          out.emplace_back(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
        }
    }
  return out;
}

RpnOutput rpn_forward(const FeatureMap& fm, const DetectorParams& params) {
  RpnOutput out;
  out.hidden = nn::conv_forward(params.rpn_conv, fm.data, &out.conv_cache);
  nn::relu_inplace(out.hidden);
  out.objectness = nn::conv_forward(params.rpn_cls, out.hidden, &out.cls_cache);
  out.deltas = nn::conv_forward(params.rpn_reg, out.hidden, &out.reg_cache);
  return out;
}

std::vector<int> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order)
      if (!suppressed[static_cast<std::size_t>(j)] && j != i &&
          iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > iou_threshold)
        suppressed[static_cast<std::size_t>(j)] = 1;
    suppressed[static_cast<std::size_t>(i)] = 1;
  }
  return keep;
}

std::vector<RoI> proposals_from_rpn(const RpnOutput& rpn, const DetectorConfig& config, int stride, int image_h,
                                    int image_w, int top_n) {
  const int fh = rpn.objectness.dim(1), fw = rpn.objectness.dim(2);
  const int a_count = config.num_anchors();
  const auto anchors = make_anchors(config, fh, fw);
  (void)stride;

  struct Candidate {
    int index;
    double score;
  };
  std::vector<Candidate> cands;
  cands.reserve(anchors.size());
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x)
      for (int a = 0; a < a_count; ++a)
        cands.push_back({(y * fw + x) * a_count + a, rpn.objectness.at(a, y, x)});
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& l, const Candidate& r) { return l.score > r.score; });

  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const auto& c : cands) {
    if (static_cast<int>(boxes.size()) >= config.pre_nms_top_n) break;
    const int cell = c.index / a_count;
    const int a = c.index % a_count;
    const int y = cell / fw, x = cell % fw;
    const BoxDelta d{rpn.deltas.at(4 * a, y, x), rpn.deltas.at(4 * a + 1, y, x), rpn.deltas.at(4 * a + 2, y, x),
                     rpn.deltas.at(4 * a + 3, y, x)};
    const Box b = decode_delta(anchors[static_cast<std::size_t>(c.index)], d);
    double x1 = b.x1(), y1 = b.y1(), x2 = b.x2(), y2 = b.y2();
    if (!Box::clip(x1, y1, x2, y2, image_w, image_h)) continue;
    if (x2 - x1 < config.min_proposal_size || y2 - y1 < config.min_proposal_size) continue;
    boxes.emplace_back(x1, y1, x2, y2);
    scores.push_back(c.score);
  }
  const auto keep = nms(boxes, scores, config.proposal_nms_iou);
  std::vector<RoI> out;
  for (int i : keep) {
    if (static_cast<int>(out.size()) >= top_n) break;
    out.push_back({boxes[static_cast<std::size_t>(i)], sigmoid(scores[static_cast<std::size_t>(i)])});
  }
  return out;
}

std::vector<RoI> generate_proposals(const FeatureMap& fm, const DetectorParams& params, int image_h, int image_w) {
  const auto rpn = rpn_forward(fm, params);
  return proposals_from_rpn(rpn, params.config, fm.stride, image_h, image_w, params.config.proposals_top_n);
}

HeadOutput head_forward(const FeatureMap& fm, std::span<const Box> rois, const DetectorParams& params,
                        const rfr::RfrBlock* block, HeadCache* cache) {
  const auto& cfg = params.config;
  const int n = static_cast<int>(rois.size());
  const int d = cfg.roi_feature_dim();
  if (block && block->channels() != fm.channels())
    throw std::invalid_argument("refinement block channels do not match the feature map");
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  c.raw = Tensor({n, d});
  c.pool.assign(static_cast<std::size_t>(n), {});
  c.rfr.assign(block ? static_cast<std::size_t>(n) : 0, {});
  for (int i = 0; i < n; ++i) {
    const auto cells = covered_cells(rois[static_cast<std::size_t>(i)], fm.stride, fm.height(), fm.width());
    Tensor pooled = nn::roi_max_pool(fm.data, cells, cfg.pool_size, &c.pool[static_cast<std::size_t>(i)]);
    std::copy(pooled.data.begin(), pooled.data.end(), c.raw.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  if (block) {
    c.pooled = c.raw;
    for (int i = 0; i < n; ++i) {
      Tensor f({fm.channels(), cfg.pool_size, cfg.pool_size});
      std::copy_n(c.raw.data.begin() + static_cast<std::ptrdiff_t>(i) * d, d, f.data.begin());
      Tensor r = rfr::rfr_forward(f, *block, &c.rfr[static_cast<std::size_t>(i)]);
      std::copy(r.data.begin(), r.data.end(), c.pooled.data.begin() + static_cast<std::ptrdiff_t>(i) * d);
    }
  } else {
    c.pooled = c.raw;
  }
  c.hidden = nn::linear_forward(params.fc, c.pooled);
  nn::relu_inplace(c.hidden);
  return {nn::linear_forward(params.cls, c.hidden), nn::linear_forward(params.reg, c.hidden)};
}

void head_backward(const FeatureMap& fm, const DetectorParams& params, const rfr::RfrBlock* block,
                   const HeadCache& cache, const Tensor& grad_logits, const Tensor& grad_deltas,
                   const HeadGrads& grads) {
  const auto& cfg = params.config;
  DetectorParams* pg = grads.params;
  const bool need_features = grads.block != nullptr || grads.features != nullptr;
  Tensor g_hidden = nn::linear_backward(params.cls, cache.hidden, grad_logits, pg ? &pg->cls : nullptr, true);
  Tensor g_hidden_reg = nn::linear_backward(params.reg, cache.hidden, grad_deltas, pg ? &pg->reg : nullptr, true);
  for (std::size_t i = 0; i < g_hidden.size(); ++i) g_hidden.data[i] += g_hidden_reg.data[i];
  nn::relu_backward_inplace(cache.hidden, g_hidden);
  Tensor g_pooled = nn::linear_backward(params.fc, cache.pooled, g_hidden, pg ? &pg->fc : nullptr, need_features);
  if (!need_features) return;

  const int n = cache.pooled.dim(0);
  const int d = cfg.roi_feature_dim();
  for (int i = 0; i < n; ++i) {
    std::span<const double> g_row(g_pooled.data.data() + static_cast<std::ptrdiff_t>(i) * d, static_cast<std::size_t>(d));
    std::vector<double> g_raw;
    if (block) {
      Tensor f({fm.channels(), cfg.pool_size, cfg.pool_size});
      std::copy_n(cache.raw.data.begin() + static_cast<std::ptrdiff_t>(i) * d, d, f.data.begin());
      Tensor g({fm.channels(), cfg.pool_size, cfg.pool_size});
      std::copy(g_row.begin(), g_row.end(), g.data.begin());
      Tensor gi = rfr::rfr_backward(f, *block, cache.rfr[static_cast<std::size_t>(i)], g, grads.block,
                                    grads.features != nullptr);
      g_raw = std::move(gi.data);
    } else {
      g_raw.assign(g_row.begin(), g_row.end());
    }
    if (grads.features) nn::roi_max_pool_backward(cache.pool[static_cast<std::size_t>(i)], g_raw, *grads.features);
  }
}

std::vector<Detection> detect_from_rois(const FeatureMap& fm, std::vector<RoI> rois, const DetectorParams& params,
                                        double score_threshold, int image_h, int image_w,
                                        const rfr::RfrBlock* block) {
  const auto& cfg = params.config;
  std::sort(rois.begin(), rois.end(), [](const RoI& a, const RoI& b) {
    if (a.objectness != b.objectness) return a.objectness > b.objectness;
    return std::make_tuple(a.box.x1(), a.box.y1(), a.box.x2(), a.box.y2()) <
           std::make_tuple(b.box.x1(), b.box.y1(), b.box.x2(), b.box.y2());
  });
  std::vector<Box> boxes;
  boxes.reserve(rois.size());
  for (const auto& r : rois) boxes.push_back(r.box);
  if (boxes.empty()) return {};
  const auto out = head_forward(fm, boxes, params, block, nullptr);
  const int n = static_cast<int>(boxes.size());
  const int outputs = cfg.num_classes + 1;

  std::vector<std::vector<double>> probs;
  probs.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    probs.push_back(nn::softmax(std::span<const double>(out.logits.data.data() + static_cast<std::ptrdiff_t>(i) * outputs,
                                                        static_cast<std::size_t>(outputs))));

  std::vector<Detection> dets;
  for (int c = 0; c < cfg.num_classes; ++c) {
    std::vector<Box> cls_boxes;
    std::vector<double> cls_scores;
    for (int i = 0; i < n; ++i) {
      const double* d = out.deltas.data.data() + static_cast<std::ptrdiff_t>(i) * 4 * cfg.num_classes + 4 * c;
      const BoxDelta delta{d[0] / cfg.reg_weights[0], d[1] / cfg.reg_weights[1], d[2] / cfg.reg_weights[2],
                           d[3] / cfg.reg_weights[3]};
      const Box b = decode_delta(boxes[static_cast<std::size_t>(i)], delta);
      double x1 = b.x1(), y1 = b.y1(), x2 = b.x2(), y2 = b.y2();
      if (!Box::clip(x1, y1, x2, y2, image_w, image_h)) continue;
      cls_boxes.emplace_back(x1, y1, x2, y2);
      cls_scores.push_back(probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(c + 1)]);
    }
    for (int k : nms(cls_boxes, cls_scores, cfg.detection_nms_iou)) {
      const double s = cls_scores[static_cast<std::size_t>(k)];
      if (s >= score_threshold) dets.push_back({cls_boxes[static_cast<std::size_t>(k)], c, s});
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.class_id < b.class_id;
  });
  return dets;
}

std::vector<Detection> detect(const Tensor& image, const DetectorParams& params, double score_threshold,
                              const rfr::RfrBlock* block) {
  const auto fm = extract_features(image, params);
  auto rois = generate_proposals(fm, params, image.dim(1), image.dim(2));
  return detect_from_rois(fm, std::move(rois), params, score_threshold, image.dim(1), image.dim(2), block);
}

}  // namespace websod::det
