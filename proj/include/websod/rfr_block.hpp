#pragma once

#include <cstdint>

#include "websod/layers.hpp"
#include "websod/tensor.hpp"

namespace websod::rfr {

/// Residual refinement of RoI features: T = conv(relu(conv(relu(conv(F))))),
/// output F * T + F. Channel count is preserved.
struct RfrBlock {
  nn::ConvLayer conv1;
  nn::ConvLayer conv2;
  nn::ConvLayer conv3;

  int channels() const { return conv1.in_channels; }
};

/// The last conv starts at zero, so a fresh block is the identity map.
RfrBlock make_rfr_block(int channels, int mid_channels, std::uint64_t seed);

struct RfrCache {
  nn::ConvCache c1, c2, c3;
  Tensor a1, a2;  // post-ReLU activations
  Tensor t;       // residual feature T
};

/// `features`: K x P x P RoI feature. Returns (F * T) + F elementwise.
Tensor rfr_forward(const Tensor& features, const RfrBlock& block, RfrCache* cache = nullptr);

/// Given d(loss)/d(output), accumulates parameter gradients into `grads` and
/// returns d(loss)/d(features) when requested.
Tensor rfr_backward(const Tensor& features, const RfrBlock& block, const RfrCache& cache, const Tensor& grad_out,
                    RfrBlock* grads, bool want_input_grad);

RfrBlock zeros_like(const RfrBlock& block);

template <typename Fn>
void for_each_tensor(RfrBlock& b, Fn&& fn) {
  fn("rfr.conv1.weight", b.conv1.weight);
  fn("rfr.conv1.bias", b.conv1.bias);
  fn("rfr.conv2.weight", b.conv2.weight);
  fn("rfr.conv2.bias", b.conv2.bias);
  fn("rfr.conv3.weight", b.conv3.weight);
  fn("rfr.conv3.bias", b.conv3.bias);
}

template <typename Fn>
void for_each_tensor(const RfrBlock& b, Fn&& fn) {
  for_each_tensor(const_cast<RfrBlock&>(b), [&](const char* name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
}

}  // namespace websod::rfr
