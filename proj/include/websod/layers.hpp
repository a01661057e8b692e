#pragma once

#include <random>
#include <span>
#include <vector>

#include "websod/tensor.hpp"

// Differentiable building blocks with explicit forward/backward passes.
namespace websod::nn {

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  Tensor weight;  // out x (in * kernel * kernel)
  Tensor bias;    // out

  ConvLayer() = default;
  ConvLayer(int in, int out, int kernel, int stride, int pad);
  int output_size(int input) const { return (input + 2 * pad - kernel) / stride + 1; }
};

struct LinearLayer {
  int in_features = 0;
  int out_features = 0;
  Tensor weight;  // out x in
  Tensor bias;    // out

  LinearLayer() = default;
  LinearLayer(int in, int out);
};

void he_init(ConvLayer& layer, std::mt19937_64& rng);
void he_init(LinearLayer& layer, std::mt19937_64& rng, double gain = 2.0);
void normal_init(LinearLayer& layer, std::mt19937_64& rng, double stddev);
void normal_init(ConvLayer& layer, std::mt19937_64& rng, double stddev);

struct ConvCache {
  Tensor cols;  // (in*k*k) x (out_h*out_w)
  int in_h = 0;
  int in_w = 0;
};

/// input: C x H x W. Output: out_channels x out_h x out_w. `cache` may be null.
Tensor conv_forward(const ConvLayer& layer, const Tensor& input, ConvCache* cache);
/// Accumulates weight/bias gradients into `grads` (same shapes as `layer`) when
/// non-null and returns the input gradient when `want_input_grad`.
Tensor conv_backward(const ConvLayer& layer, const ConvCache& cache, const Tensor& grad_out, ConvLayer* grads,
                     bool want_input_grad);

/// input: N x in. Output: N x out.
Tensor linear_forward(const LinearLayer& layer, const Tensor& input);
Tensor linear_backward(const LinearLayer& layer, const Tensor& input, const Tensor& grad_out, LinearLayer* grads,
                       bool want_input_grad);

void relu_inplace(Tensor& t);
/// grad *= (activated > 0), where `activated` is the ReLU output.
void relu_backward_inplace(const Tensor& activated, Tensor& grad);

std::vector<double> softmax(std::span<const double> logits);
double log_sum_exp(std::span<const double> logits);

/// Max-pools the feature cells covered by `box_cells` into a pool x pool grid.
/// Cells are given as half-open ranges [y0,y1) x [x0,x1) of the feature map.
struct RoiPoolCache {
  std::vector<int> argmax;  // K * pool * pool flat feature indices
};
struct CellRange {
  int x0, y0, x1, y1;
};
Tensor roi_max_pool(const Tensor& features, const CellRange& cells, int pool, RoiPoolCache* cache);
void roi_max_pool_backward(const RoiPoolCache& cache, std::span<const double> grad_out, Tensor& grad_features);

}  // namespace websod::nn
