#include "websod/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace websod::train {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Numerically stable binary cross entropy with logits.
double bce_with_logit(double logit, int label) {
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

std::array<double, 4> scaled(const det::BoxDelta& d, const std::array<double, 4>& w) {
  return {d.tx * w[0], d.ty * w[1], d.tw * w[2], d.th * w[3]};
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

Trunk trunk_forward(const det::DetectorParams& params, const Tensor& image) {
  Trunk t;
  t.fm = det::extract_features(image, params, &t.backbone);
  t.rpn = det::rpn_forward(t.fm, params);
  return t;
}

RoiPlan plan_rois(const Trunk& trunk, const det::DetectorParams& params, const TrainSample& sample,
                  const SamplingConfig& sampling, std::mt19937_64& rng) {
  RoiPlan plan;
  if (!sample.detector_supervision) return plan;
  const auto& cfg = params.config;
  const int image_h = sample.image->dim(1), image_w = sample.image->dim(2);
  const auto& gts = sample.boxes;

  // Anchor labels for the proposal network.
  const auto anchors = det::make_anchors(cfg, trunk.fm.height(), trunk.fm.width());
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<int> best_gt(anchors.size(), -1);
  std::vector<double> gt_best(gts.size(), 0.0);
  for (std::size_t a = 0; a < anchors.size(); ++a)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g].box);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  std::vector<int> label(anchors.size(), -1);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (best_iou[a] < sampling.rpn_negative_iou) label[a] = 0;
    if (best_iou[a] >= sampling.rpn_positive_iou) label[a] = 1;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t a = 0; a < anchors.size(); ++a)
      if (iou(anchors[a], gts[g].box) == gt_best[g]) {
        label[a] = 1;
        best_gt[a] = static_cast<int>(g);
      }
  }
  std::vector<int> pos, neg;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (label[a] == 1) pos.push_back(static_cast<int>(a));
    if (label[a] == 0) neg.push_back(static_cast<int>(a));
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const auto max_pos = static_cast<std::size_t>(sampling.rpn_batch * sampling.rpn_positive_fraction);
  pos.resize(std::min(pos.size(), max_pos));
  neg.resize(std::min(neg.size(), static_cast<std::size_t>(sampling.rpn_batch) - pos.size()));
  std::vector<int> chosen = pos;
  chosen.insert(chosen.end(), neg.begin(), neg.end());
  std::sort(chosen.begin(), chosen.end());
  for (int a : chosen) {
    plan.anchor_index.push_back(a);
    plan.anchor_label.push_back(label[static_cast<std::size_t>(a)]);
    if (label[static_cast<std::size_t>(a)] == 1)
      plan.anchor_target.push_back(scaled(
          det::encode_delta(anchors[static_cast<std::size_t>(a)], gts[static_cast<std::size_t>(best_gt[static_cast<std::size_t>(a)])].box),
          {1.0, 1.0, 1.0, 1.0}));
    else
      plan.anchor_target.push_back({0.0, 0.0, 0.0, 0.0});
  }

  // Candidate RoIs: current proposals, ground truth and jittered ground truth.
  std::vector<Box> cands;
  for (const auto& r : det::proposals_from_rpn(trunk.rpn, cfg, trunk.fm.stride, image_h, image_w,
                                               sampling.train_proposals))
    cands.push_back(r.box);
  std::uniform_real_distribution<double> jitter(-0.15, 0.15);
  for (const auto& g : gts) {
    cands.push_back(g.box);
    for (int j = 0; j < sampling.gt_jitter; ++j) {
      const double w = g.box.width(), h = g.box.height();
      double x1 = g.box.x1() + jitter(rng) * w, y1 = g.box.y1() + jitter(rng) * h;
      double x2 = g.box.x2() + jitter(rng) * w, y2 = g.box.y2() + jitter(rng) * h;
      if (Box::clip(x1, y1, x2, y2, image_w, image_h) && x2 - x1 >= 2.0 && y2 - y1 >= 2.0)
        cands.emplace_back(x1, y1, x2, y2);
    }
  }
  std::vector<int> fg, bg;
  std::vector<int> cand_gt(cands.size(), -1);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    double best = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(cands[i], gts[g].box);
      if (v > best) {
        best = v;
        cand_gt[i] = static_cast<int>(g);
      }
    }
    if (best >= sampling.foreground_iou)
      fg.push_back(static_cast<int>(i));
    else if (best < sampling.background_iou)
      bg.push_back(static_cast<int>(i));
  }
  std::shuffle(fg.begin(), fg.end(), rng);
  std::shuffle(bg.begin(), bg.end(), rng);
  const auto max_fg = static_cast<std::size_t>(sampling.roi_batch * sampling.roi_foreground_fraction);
  fg.resize(std::min(fg.size(), max_fg));
  bg.resize(std::min(bg.size(), static_cast<std::size_t>(sampling.roi_batch) - fg.size()));
  for (int i : fg) {
    const auto& g = gts[static_cast<std::size_t>(cand_gt[static_cast<std::size_t>(i)])];
    plan.rois.push_back(cands[static_cast<std::size_t>(i)]);
    plan.roi_label.push_back(g.class_id + 1);
    plan.roi_target.push_back(scaled(det::encode_delta(cands[static_cast<std::size_t>(i)], g.box), cfg.reg_weights));
  }
  for (int i : bg) {
    plan.rois.push_back(cands[static_cast<std::size_t>(i)]);
    plan.roi_label.push_back(0);
    plan.roi_target.push_back({0.0, 0.0, 0.0, 0.0});
  }
  return plan;
}

std::vector<double> attention_weights(const det::DetectorParams& params, const Tensor& cam_features, int stride,
                                      std::span<const Box> rois, std::span<const int> roi_labels, int image_label,
                                      const attn::AttentionConfig& cfg) {
  std::vector<double> weights(rois.size(), 1.0);
  if (rois.empty()) return weights;
  attn::AttentionMap m;
  std::vector<int> pool_labels;
  if (cfg.softmax_axis == attn::SoftmaxAxis::Spatial) {
    m.maps = attn::compute_cam(cam_features, params.cam.classifier, image_label);
    pool_labels.assign(rois.size(), 0);
  } else {
    m = attn::compute_cams(cam_features, params.cam.classifier);
    pool_labels.assign(rois.size(), image_label);
  }
  m = attn::class_softmax(m, cfg.softmax_axis);
  const auto raw = attn::roi_attention_pool(m, rois, pool_labels, stride, cfg.reduce);
  const auto norm = attn::normalize_attention(raw, cfg.delta);
  for (std::size_t i = 0; i < rois.size(); ++i)
    if (roi_labels[i] > 0) weights[i] = norm.normalized[i];
  return weights;
}

LossBreakdown loss_and_grad(const det::DetectorParams& params, const rfr::RfrBlock* block, const Trunk& trunk,
                            const RoiPlan& plan, const TrainSample& sample, const LossSpec& spec,
                            det::DetectorParams* grads, rfr::RfrBlock* block_grads, bool trunk_grads) {
  const auto& cfg = params.config;
  const bool into_trunk = trunk_grads && grads != nullptr;
  LossBreakdown out;
  Tensor g_fm;
  if (into_trunk) g_fm = trunk.fm.data.zeros_like();

  // Proposal network.
  if (spec.rpn && !plan.anchor_index.empty()) {
    const int fw = trunk.fm.width();
    const int a_count = cfg.num_anchors();
    const double n = static_cast<double>(plan.anchor_index.size());
    Tensor g_obj = trunk.rpn.objectness.zeros_like();
    Tensor g_del = trunk.rpn.deltas.zeros_like();
    for (std::size_t i = 0; i < plan.anchor_index.size(); ++i) {
      const int idx = plan.anchor_index[i];
      const int cell = idx / a_count, a = idx % a_count;
      const int y = cell / fw, x = cell % fw;
      const double logit = trunk.rpn.objectness.at(a, y, x);
      const int lab = plan.anchor_label[i];
      out.rpn_cls += bce_with_logit(logit, lab) / n;
      g_obj.at(a, y, x) = spec.rpn_weight * (sigmoid(logit) - lab) / n;
      if (lab == 1)
        for (int j = 0; j < 4; ++j) {
          const double diff = trunk.rpn.deltas.at(4 * a + j, y, x) - plan.anchor_target[i][static_cast<std::size_t>(j)];
          out.rpn_reg += det::smooth_l1(diff) / n;
          g_del.at(4 * a + j, y, x) = spec.rpn_weight * det::smooth_l1_grad(diff) / n;
        }
    }
    if (grads) {
      Tensor g_hidden = nn::conv_backward(params.rpn_cls, trunk.rpn.cls_cache, g_obj, &grads->rpn_cls, into_trunk);
      Tensor g_hidden2 = nn::conv_backward(params.rpn_reg, trunk.rpn.reg_cache, g_del, &grads->rpn_reg, into_trunk);
      if (into_trunk) {
        add_into(g_hidden, g_hidden2);
        nn::relu_backward_inplace(trunk.rpn.hidden, g_hidden);
        add_into(g_fm, nn::conv_backward(params.rpn_conv, trunk.rpn.conv_cache, g_hidden, &grads->rpn_conv, true));
      }
    }
  }

  // Image classification branch; its features also feed the attention maps.
  std::optional<attn::CamOutput> cam;
  const bool labelled = sample.image_label >= 0;
  if (labelled && (spec.image_cls || (spec.attentive && !plan.fixed_attention)))
    cam = attn::cam_forward(trunk.fm, params.cam);

  // RoI head.
  std::vector<double> reg_per_roi;
  if (sample.detector_supervision && !plan.rois.empty()) {
    const int n = static_cast<int>(plan.rois.size());
    const int outputs = cfg.num_classes + 1;
    det::HeadCache cache;
    const auto head = det::head_forward(trunk.fm, plan.rois, params, block, &cache);

    if (plan.fixed_attention) {
      out.roi_weights = *plan.fixed_attention;
    } else if (spec.attentive && labelled) {
      out.roi_weights = attention_weights(params, cam->features, trunk.fm.stride, plan.rois, plan.roi_label,
                                          sample.image_label, spec.attention);
    } else {
      out.roi_weights.assign(static_cast<std::size_t>(n), 1.0);
    }

    std::vector<double> g_logits_vec;
    out.cls = attn::acl_from_logits(head.logits.data, outputs, plan.roi_label, out.roi_weights,
                                    grads || block_grads || into_trunk ? &g_logits_vec : nullptr);
    Tensor g_logits({n, outputs});
    if (!g_logits_vec.empty())
      for (std::size_t i = 0; i < g_logits.size(); ++i) g_logits.data[i] = spec.lambda1 * g_logits_vec[i];

    Tensor g_deltas({n, 4 * cfg.num_classes});
    reg_per_roi.assign(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
      const int lab = plan.roi_label[static_cast<std::size_t>(i)];
      if (lab == 0) continue;
      for (int j = 0; j < 4; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * 4 * cfg.num_classes + 4 * (lab - 1) + j;
        const double diff = head.deltas.data[k] - plan.roi_target[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        reg_per_roi[static_cast<std::size_t>(i)] += det::smooth_l1(diff);
        g_deltas.data[k] = spec.lambda2 * det::smooth_l1_grad(diff) / n;
      }
    }
    out.num_rois = n;
    if (grads || block_grads || into_trunk)
      det::head_backward(trunk.fm, params, block, cache, g_logits, g_deltas,
                         {grads, block_grads, into_trunk ? &g_fm : nullptr});
  }

  if (labelled && spec.image_cls) {
    std::vector<double> g;
    out.icls = attn::image_cls_loss(cam->logits, sample.image_label, &g);
    if (grads) {
      for (auto& v : g) v *= spec.lambda3;
      Tensor g_cam = attn::cam_backward(trunk.fm, params.cam, *cam, g, &grads->cam);
      if (into_trunk) add_into(g_fm, g_cam);
    }
  }

  const auto t = attn::total_loss(out.cls, reg_per_roi, out.icls, spec.lambda1, spec.lambda2,
                                  spec.image_cls ? spec.lambda3 : 0.0);
  out.reg = t.reg;
  out.total = t.total + (spec.rpn ? spec.rpn_weight * (out.rpn_cls + out.rpn_reg) : 0.0);
  if (!std::isfinite(out.total)) throw attn::NonFiniteLoss("non-finite total loss");

  if (into_trunk) {
    Tensor g = std::move(g_fm);
    for (std::size_t li = params.backbone.size(); li-- > 0;) {
      nn::relu_backward_inplace(trunk.backbone.activations[li], g);
      g = nn::conv_backward(params.backbone[li], trunk.backbone.convs[li], g, &grads->backbone[li], li > 0);
    }
  }
  return out;
}

std::vector<int> batch_indices(std::size_t stream_size, int batch_size, int batch, std::uint64_t seed,
                               std::size_t stream_id) {
  std::vector<int> out;
  if (stream_size == 0) return out;
  const auto n = static_cast<long long>(stream_size);
  long long pos = static_cast<long long>(batch) * batch_size;
  long long epoch = -1;
  std::vector<int> perm;
  for (int b = 0; b < batch_size; ++b, ++pos) {
    const long long e = pos / n;
    if (e != epoch) {
      epoch = e;
      perm.resize(stream_size);
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix(seed ^ mix(static_cast<std::uint64_t>(e) * 1315423911ULL + stream_id)));
      std::shuffle(perm.begin(), perm.end(), rng);
    }
    out.push_back(perm[static_cast<std::size_t>(pos % n)]);
  }
  return out;
}

std::mt19937_64 sample_rng(std::uint64_t seed, int step, int index) {
  return std::mt19937_64(mix(seed ^ mix((static_cast<std::uint64_t>(step) << 32) ^ static_cast<std::uint64_t>(index))));
}

LossBreakdown batch_loss(const det::DetectorParams& params, const rfr::RfrBlock* block, const Stream& stream,
                         std::span<const int> indices, const SamplingConfig& sampling, std::uint64_t seed, int step,
                         det::DetectorParams* grads, rfr::RfrBlock* block_grads, bool trunk_grads) {
  LossBreakdown mean;
  if (indices.empty()) return mean;
  const double inv = 1.0 / static_cast<double>(indices.size());
  for (int idx : indices) {
    const auto& sample = stream.samples[static_cast<std::size_t>(idx)];
    auto rng = sample_rng(seed, step, idx);
    const auto trunk = trunk_forward(params, *sample.image);
    const auto plan = plan_rois(trunk, params, sample, sampling, rng);
    LossBreakdown l;
    try {
      l = loss_and_grad(params, block, trunk, plan, sample, stream.spec, grads, block_grads, trunk_grads);
    } catch (const attn::NonFiniteLoss& e) {
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step) + " on image '" +
                          sample.image_id + "' (stream " + stream.name + ")");
    }
    mean.cls += l.cls * inv;
    mean.reg += l.reg * inv;
    mean.icls += l.icls * inv;
    mean.rpn_cls += l.rpn_cls * inv;
    mean.rpn_reg += l.rpn_reg * inv;
    mean.total += l.total * inv;
    mean.num_rois += l.num_rois;
  }
  return mean;
}

namespace {

bool detector_tensor_trainable(const std::string& name, const TrainableSet& t) {
  if (name.rfind("backbone.", 0) == 0) return t.backbone;
  if (name.rfind("rpn.", 0) == 0) return t.rpn;
  if (name.rfind("head.fc.", 0) == 0) return t.head_hidden;
  if (name.rfind("head.", 0) == 0) return t.head_out;
  if (name.rfind("cam.", 0) == 0) return t.cam;
  return false;
}

bool is_weight(const std::string& name) {
  return name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

struct TensorRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
  Tensor* velocity;
};

}  // namespace

TrainResult train(det::DetectorParams& params, rfr::RfrBlock* block, std::span<const Stream> streams,
                  const TrainableSet& trainable, const SamplingConfig& sampling, const Schedule& schedule) {
  if (streams.empty()) throw TrainingError("no training streams");
  for (const auto& s : streams)
    if (s.samples.empty()) throw TrainingError("training stream '" + s.name + "' is empty");
  if (trainable.rfr && block == nullptr) throw TrainingError("refinement block is trainable but absent");

  det::DetectorParams grads = params.zeros_like();
  det::DetectorParams velocity = params.zeros_like();
  rfr::RfrBlock block_grads, block_velocity;
  if (block) {
    block_grads = rfr::zeros_like(*block);
    block_velocity = rfr::zeros_like(*block);
  }

  std::vector<TensorRef> refs;
  {
    std::vector<std::pair<std::string, Tensor*>> v, g, m;
    for_each_tensor(params, [&](const std::string& n, Tensor& t) { v.emplace_back(n, &t); });
    for_each_tensor(grads, [&](const std::string& n, Tensor& t) { g.emplace_back(n, &t); });
    for_each_tensor(velocity, [&](const std::string& n, Tensor& t) { m.emplace_back(n, &t); });
    for (std::size_t i = 0; i < v.size(); ++i)
      if (detector_tensor_trainable(v[i].first, trainable)) refs.push_back({v[i].first, v[i].second, g[i].second, m[i].second});
    if (block && trainable.rfr) {
      std::vector<std::pair<std::string, Tensor*>> bv, bg, bm;
      rfr::for_each_tensor(*block, [&](const char* n, Tensor& t) { bv.emplace_back(n, &t); });
      rfr::for_each_tensor(block_grads, [&](const char* n, Tensor& t) { bg.emplace_back(n, &t); });
      rfr::for_each_tensor(block_velocity, [&](const char* n, Tensor& t) { bm.emplace_back(n, &t); });
      for (std::size_t i = 0; i < bv.size(); ++i) refs.push_back({bv[i].first, bv[i].second, bg[i].second, bm[i].second});
    }
  }
  const bool trunk_grads = trainable.backbone || trainable.rpn;
  const bool detector_grads = trainable.backbone || trainable.rpn || trainable.head_hidden || trainable.head_out ||
                              trainable.cam;

  TrainResult result;
  std::vector<int> stream_batches(streams.size(), 0);
  const int drop_step = static_cast<int>(schedule.lr_drop_fraction * schedule.steps);
  for (int step = 0; step < schedule.steps; ++step) {
    const std::size_t sid = static_cast<std::size_t>(step) % streams.size();
    const auto& stream = streams[sid];
    const auto indices = batch_indices(stream.samples.size(), schedule.batch_size, stream_batches[sid]++,
                                       schedule.seed, sid);
    for (auto& r : refs) r.grad->fill(0.0);

    auto loss = batch_loss(params, block, stream, indices, sampling, schedule.seed, step,
                           detector_grads ? &grads : nullptr, block && trainable.rfr ? &block_grads : nullptr,
                           trunk_grads);
    result.history.push_back({step, stream.name, loss});

    double lr = schedule.lr;
    if (schedule.warmup_steps > 0 && step < schedule.warmup_steps)
      lr *= static_cast<double>(step + 1) / schedule.warmup_steps;
    if (step >= drop_step) lr *= schedule.lr_drop_factor;

    const double inv = 1.0 / static_cast<double>(indices.size());
    double norm2 = 0.0;
    for (auto& r : refs)
      for (auto& g : r.grad->data) {
        g *= inv;
        norm2 += g * g;
      }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm))
      throw TrainingError("non-finite gradient at step " + std::to_string(step) + " (stream " + stream.name + ")");
    const double clip = (schedule.clip_norm > 0.0 && norm > schedule.clip_norm) ? schedule.clip_norm / norm : 1.0;
    for (auto& r : refs) {
      const bool decay = is_weight(r.name);
      for (std::size_t i = 0; i < r.value->size(); ++i) {
        double g = r.grad->data[i] * clip;
        if (decay) g += schedule.weight_decay * r.value->data[i];
        r.velocity->data[i] = schedule.momentum * r.velocity->data[i] + g;
        r.value->data[i] -= lr * r.velocity->data[i];
      }
    }
  }
  return result;
}

TrainResult train_detector(det::DetectorParams& params, const Stream& stream, const SamplingConfig& sampling,
                           const Schedule& schedule) {
  return train(params, nullptr, std::span<const Stream>(&stream, 1), TrainableSet::all_detector(), sampling, schedule);
}

}  // namespace websod::train
