#include "websod/rfr_block.hpp"

#include <random>
#include <stdexcept>

namespace websod::rfr {

RfrBlock make_rfr_block(int channels, int mid_channels, std::uint64_t seed) {
  if (channels < 1 || mid_channels < 1) throw std::invalid_argument("rfr block needs positive channel counts");
  RfrBlock b{nn::ConvLayer(channels, mid_channels, 3, 1, 1), nn::ConvLayer(mid_channels, mid_channels, 3, 1, 1),
             nn::ConvLayer(mid_channels, channels, 3, 1, 1)};
  std::mt19937_64 rng(seed);
  nn::he_init(b.conv1, rng);
  nn::he_init(b.conv2, rng);
  b.conv3.weight.fill(0.0);
  b.conv3.bias.fill(0.0);
  return b;
}

RfrBlock zeros_like(const RfrBlock& block) {
  RfrBlock z = block;
  for_each_tensor(z, [](const char*, Tensor& t) { t.fill(0.0); });
  return z;
}

Tensor rfr_forward(const Tensor& features, const RfrBlock& block, RfrCache* cache) {
  if (features.rank() != 3 || features.dim(0) != block.channels())
    throw std::invalid_argument("rfr_forward: feature shape " + features.shape_string() + " does not match " +
                                std::to_string(block.channels()) + " channels");
  RfrCache local;
  RfrCache& c = cache ? *cache : local;
  c.a1 = nn::conv_forward(block.conv1, features, &c.c1);
  nn::relu_inplace(c.a1);
  c.a2 = nn::conv_forward(block.conv2, c.a1, &c.c2);
  nn::relu_inplace(c.a2);
  c.t = nn::conv_forward(block.conv3, c.a2, &c.c3);
  if (!c.t.same_shape(features)) throw std::invalid_argument("rfr_forward: block changes the feature shape");
  Tensor out = features;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = features.data[i] * c.t.data[i] + features.data[i];
  return out;
}

Tensor rfr_backward(const Tensor& features, const RfrBlock& block, const RfrCache& cache, const Tensor& grad_out,
                    RfrBlock* grads, bool want_input_grad) {
  Tensor g_t = grad_out.zeros_like();
  for (std::size_t i = 0; i < g_t.size(); ++i) g_t.data[i] = grad_out.data[i] * features.data[i];
  const bool need_chain = want_input_grad || grads != nullptr;
  Tensor g_in;
  if (need_chain) {
    Tensor g_a2 = nn::conv_backward(block.conv3, cache.c3, g_t, grads ? &grads->conv3 : nullptr, true);
    nn::relu_backward_inplace(cache.a2, g_a2);
    Tensor g_a1 = nn::conv_backward(block.conv2, cache.c2, g_a2, grads ? &grads->conv2 : nullptr, true);
    nn::relu_backward_inplace(cache.a1, g_a1);
    g_in = nn::conv_backward(block.conv1, cache.c1, g_a1, grads ? &grads->conv1 : nullptr, want_input_grad);
  }
  if (!want_input_grad) return {};
  // Direct path: d/dF (F * T + F) = T + 1.
  for (std::size_t i = 0; i < g_in.size(); ++i) g_in.data[i] += grad_out.data[i] * (cache.t.data[i] + 1.0);
  return g_in;
}

}  // namespace websod::rfr
