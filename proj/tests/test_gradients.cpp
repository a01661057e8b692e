// Analytic gradients against central differences (h = 1e-4).
#include <gtest/gtest.h>

#include "test_util.hpp"
#include "websod/attention.hpp"
#include "websod/detector.hpp"
#include "websod/rfr_block.hpp"
#include "websod/training.hpp"

using namespace websod;
using websod::testing::central_difference;
using websod::testing::grad_close;
using websod::testing::random_tensor;

TEST(Gradients, AttentiveClassificationLoss) {
  std::mt19937_64 rng(21);
  const int n = 5, outputs = 4;
  auto logits = random_tensor({n, outputs}, rng, -2.0, 2.0).data;
  const auto weights = random_tensor({n}, rng, 0.0, 1.0).data;
  const std::vector<int> labels{0, 3, 1, 0, 2};
  std::vector<double> g;
  attn::acl_from_logits(logits, outputs, labels, weights, &g);
  auto f = [&] { return attn::acl_from_logits(logits, outputs, labels, weights, nullptr); };
  for (std::size_t i = 0; i < logits.size(); ++i)
    EXPECT_TRUE(grad_close(g[i], central_difference(f, logits[i]))) << i;
}

TEST(Gradients, ImageCrossEntropy) {
  std::mt19937_64 rng(22);
  auto z = random_tensor({6}, rng, -3.0, 3.0).data;
  for (int label = 0; label < 6; ++label) {
    std::vector<double> g;
    attn::image_cls_loss(z, label, &g);
    auto f = [&] { return attn::image_cls_loss(z, label); };
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_TRUE(grad_close(g[i], central_difference(f, z[i])));
  }
}

TEST(Gradients, SmoothL1) {
  for (double x : {-3.0, -1.2, -0.7, -0.2, 0.0, 0.05, 0.4, 0.99, 1.01, 2.5}) {
    double v = x;
    auto f = [&] { return det::smooth_l1(v); };
    EXPECT_TRUE(grad_close(det::smooth_l1_grad(x), central_difference(f, v))) << x;
  }
}

TEST(Gradients, RefinementBlockInputAndParameters) {
  std::mt19937_64 rng(23);
  auto block = rfr::make_rfr_block(4, 3, 5);
  // Non-zero last conv so the residual path is exercised.
  block.conv3.weight = random_tensor(block.conv3.weight.shape, rng, -0.5, 0.5);
  block.conv3.bias = random_tensor(block.conv3.bias.shape, rng, -0.5, 0.5);
  auto x = random_tensor({4, 3, 3}, rng);
  const auto probe = random_tensor({4, 3, 3}, rng);
  auto f = [&] {
    const auto y = rfr::rfr_forward(x, block);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };
  rfr::RfrCache cache;
  rfr::rfr_forward(x, block, &cache);
  auto grads = rfr::zeros_like(block);
  const auto gx = rfr::rfr_backward(x, block, cache, probe, &grads, true);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_TRUE(grad_close(gx[i], central_difference(f, x.data[i])));
  std::vector<Tensor*> analytic;
  rfr::for_each_tensor(grads, [&](const char*, Tensor& t) { analytic.push_back(&t); });
  std::size_t k = 0;
  rfr::for_each_tensor(block, [&](const char* name, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
      EXPECT_TRUE(grad_close((*analytic[k])[i], central_difference(f, t.data[i]))) << name << "[" << i << "]";
    ++k;
  });
}

namespace {

det::DetectorConfig mini_config() {
  det::DetectorConfig c;
  c.num_classes = 3;
  c.backbone_channels = {4, 6};
  c.backbone_strides = {1, 2};
  c.rpn_channels = 4;
  c.anchor_sizes = {6.0, 10.0};
  c.anchor_ratios = {1.0};
  c.pool_size = 2;
  c.fc_dim = 8;
  c.cam_channels = 5;
  c.pre_nms_top_n = 30;
  c.proposals_top_n = 8;
  return c;
}

}  // namespace

// The whole image loss of a mini detector with a fixed RoI plan and fixed
// attention weights: every parameter group is checked on sampled entries.
TEST(Gradients, FullDetectorLossWithFixedPlan) {
  std::mt19937_64 rng(24);
  auto params = det::init_detector(mini_config(), 7);
  // Perturb the zero-initialised refinement output layer and small heads so every path carries signal.
  auto block = rfr::make_rfr_block(6, 3, 8);
  block.conv3.weight = random_tensor(block.conv3.weight.shape, rng, -0.3, 0.3);
  params.reg.weight = random_tensor(params.reg.weight.shape, rng, -0.2, 0.2);
  params.cls.weight = random_tensor(params.cls.weight.shape, rng, -0.3, 0.3);

  const Tensor image = random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  train::TrainSample sample{"mini", &image, {{Box(3, 4, 11, 12), 1}, {Box(9, 1, 15, 7), 2}}, 1, true};
  train::SamplingConfig sampling;
  sampling.rpn_batch = 16;
  sampling.roi_batch = 8;
  sampling.roi_foreground_fraction = 0.5;
  sampling.gt_jitter = 2;
  train::LossSpec spec;
  spec.attentive = true;
  spec.image_cls = true;
  spec.lambda1 = 1.0;
  spec.lambda2 = 0.7;
  spec.lambda3 = 0.5;

  auto plan_rng = train::sample_rng(1, 0, 0);
  auto plan = train::plan_rois(train::trunk_forward(params, image), params, sample, sampling, plan_rng);
  ASSERT_FALSE(plan.rois.empty());
  ASSERT_FALSE(plan.anchor_index.empty());
  plan.fixed_attention = random_tensor({static_cast<int>(plan.rois.size())}, rng, 0.0, 1.0).data;

  auto f = [&] {
    return train::loss_and_grad(params, &block, train::trunk_forward(params, image), plan, sample, spec, nullptr,
                                nullptr, false)
        .total;
  };
  auto grads = params.zeros_like();
  auto block_grads = rfr::zeros_like(block);
  train::loss_and_grad(params, &block, train::trunk_forward(params, image), plan, sample, spec, &grads, &block_grads,
                       true);

  std::vector<Tensor*> g_tensors;
  for_each_tensor(grads, [&](const std::string&, Tensor& t) { g_tensors.push_back(&t); });
  std::size_t k = 0;
  int checked = 0;
  for_each_tensor(params, [&](const std::string& name, Tensor& t) {
    std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
    for (int s = 0; s < 4; ++s) {
      const std::size_t i = pick(rng);
      const double numeric = central_difference(f, t.data[i]);
      EXPECT_TRUE(grad_close((*g_tensors[k])[i], numeric)) << name << "[" << i << "] analytic " << (*g_tensors[k])[i]
                                                           << " numeric " << numeric;
      ++checked;
    }
    ++k;
  });
  std::vector<Tensor*> gb;
  rfr::for_each_tensor(block_grads, [&](const char*, Tensor& t) { gb.push_back(&t); });
  k = 0;
  rfr::for_each_tensor(block, [&](const char* name, Tensor& t) {
    for (std::size_t i = 0; i < std::min<std::size_t>(t.size(), 4); ++i)
      EXPECT_TRUE(grad_close((*gb[k])[i], central_difference(f, t.data[i]))) << name << "[" << i << "]";
    ++k;
  });
  EXPECT_GT(checked, 50);
}
