#include "websod/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace websod::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

void im2col(const Tensor& in, const ConvLayer& l, int out_h, int out_w, Tensor& cols) {
  const int c_in = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int k = l.kernel;
  cols = Tensor({c_in * k * k, out_h * out_w});
  double* dst = cols.data.data();
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * l.stride - l.pad + ky;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * l.stride - l.pad + kx;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? in.at(c, iy, ix) : 0.0;
          }
        }
      }
}

void col2im(const Tensor& cols, const ConvLayer& l, int out_h, int out_w, Tensor& grad_in) {
  const int c_in = grad_in.dim(0), h = grad_in.dim(1), w = grad_in.dim(2);
  const int k = l.kernel;
  const double* src = cols.data.data();
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * l.stride - l.pad + ky;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * l.stride - l.pad + kx;
            const double v = *src++;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) grad_in.at(c, iy, ix) += v;
          }
        }
      }
}

}  // namespace

ConvLayer::ConvLayer(int in, int out, int k, int s, int p)
    : in_channels(in), out_channels(out), kernel(k), stride(s), pad(p), weight({out, in * k * k}), bias({out}) {}

LinearLayer::LinearLayer(int in, int out) : in_features(in), out_features(out), weight({out, in}), bias({out}) {}

void he_init(ConvLayer& layer, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(layer.in_channels * layer.kernel * layer.kernel);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : layer.weight.data) v = dist(rng);
  layer.bias.fill(0.0);
}

void he_init(LinearLayer& layer, std::mt19937_64& rng, double gain) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / layer.in_features));
  for (auto& v : layer.weight.data) v = dist(rng);
  layer.bias.fill(0.0);
}

void normal_init(LinearLayer& layer, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : layer.weight.data) v = dist(rng);
  layer.bias.fill(0.0);
}

void normal_init(ConvLayer& layer, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : layer.weight.data) v = dist(rng);
  layer.bias.fill(0.0);
}

Tensor conv_forward(const ConvLayer& layer, const Tensor& input, ConvCache* cache) {
  if (input.rank() != 3 || input.dim(0) != layer.in_channels)
    throw std::invalid_argument("conv input shape " + input.shape_string() + " does not match " +
                                std::to_string(layer.in_channels) + " input channels");
  const int out_h = layer.output_size(input.dim(1));
  const int out_w = layer.output_size(input.dim(2));
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("conv input too small: " + input.shape_string());

  ConvCache local;
  ConvCache& c = cache ? *cache : local;
  c.in_h = input.dim(1);
  c.in_w = input.dim(2);
  im2col(input, layer, out_h, out_w, c.cols);

  Tensor out({layer.out_channels, out_h, out_w});
  ConstMapMat w(layer.weight.data.data(), layer.out_channels, layer.in_channels * layer.kernel * layer.kernel);
  ConstMapMat cols(c.cols.data.data(), c.cols.dim(0), c.cols.dim(1));
  MapMat o(out.data.data(), layer.out_channels, out_h * out_w);
  o.noalias() = w * cols;
  o.colwise() += ConstMapVec(layer.bias.data.data(), layer.out_channels);
  return out;
}

Tensor conv_backward(const ConvLayer& layer, const ConvCache& cache, const Tensor& grad_out, ConvLayer* grads,
                     bool want_input_grad) {
  const int out_h = grad_out.dim(1), out_w = grad_out.dim(2);
  const int rows = layer.in_channels * layer.kernel * layer.kernel;
  ConstMapMat g(grad_out.data.data(), layer.out_channels, out_h * out_w);
  ConstMapMat cols(cache.cols.data.data(), rows, out_h * out_w);
  if (grads) {
    MapMat gw(grads->weight.data.data(), layer.out_channels, rows);
    gw.noalias() += g * cols.transpose();
    MapVec(grads->bias.data.data(), layer.out_channels) += g.rowwise().sum();
  }
  if (!want_input_grad) return {};
  ConstMapMat w(layer.weight.data.data(), layer.out_channels, rows);
  Tensor dcols({rows, out_h * out_w});
  MapMat(dcols.data.data(), rows, out_h * out_w).noalias() = w.transpose() * g;
  Tensor grad_in({layer.in_channels, cache.in_h, cache.in_w});
  col2im(dcols, layer, out_h, out_w, grad_in);
  return grad_in;
}

Tensor linear_forward(const LinearLayer& layer, const Tensor& input) {
  if (input.rank() != 2 || input.dim(1) != layer.in_features)
    throw std::invalid_argument("linear input shape " + input.shape_string() + " does not match " +
                                std::to_string(layer.in_features) + " features");
  const int n = input.dim(0);
  Tensor out({n, layer.out_features});
  ConstMapMat x(input.data.data(), n, layer.in_features);
  ConstMapMat w(layer.weight.data.data(), layer.out_features, layer.in_features);
  MapMat o(out.data.data(), n, layer.out_features);
  o.noalias() = x * w.transpose();
  o.rowwise() += ConstMapVec(layer.bias.data.data(), layer.out_features).transpose();
  return out;
}

Tensor linear_backward(const LinearLayer& layer, const Tensor& input, const Tensor& grad_out, LinearLayer* grads,
                       bool want_input_grad) {
  const int n = input.dim(0);
  ConstMapMat x(input.data.data(), n, layer.in_features);
  ConstMapMat g(grad_out.data.data(), n, layer.out_features);
  if (grads) {
    MapMat(grads->weight.data.data(), layer.out_features, layer.in_features).noalias() += g.transpose() * x;
    MapVec(grads->bias.data.data(), layer.out_features) += g.colwise().sum().transpose();
  }
  if (!want_input_grad) return {};
  Tensor grad_in({n, layer.in_features});
  ConstMapMat w(layer.weight.data.data(), layer.out_features, layer.in_features);
  MapMat(grad_in.data.data(), n, layer.in_features).noalias() = g * w;
  return grad_in;
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(const Tensor& activated, Tensor& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activated.data[i] > 0.0)) grad.data[i] = 0.0;
}

double log_sum_exp(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

Tensor roi_max_pool(const Tensor& features, const CellRange& cells, int pool, RoiPoolCache* cache) {
  const int k = features.dim(0);
  const int fh = features.dim(1), fw = features.dim(2);
  const int len_x = cells.x1 - cells.x0;
  const int len_y = cells.y1 - cells.y0;
  if (len_x < 1 || len_y < 1) throw std::invalid_argument("roi_max_pool: empty cell range");
  Tensor out({k, pool, pool});
  if (cache) cache->argmax.assign(static_cast<std::size_t>(k) * pool * pool, -1);
  for (int py = 0; py < pool; ++py) {
    const int ys = cells.y0 + (py * len_y) / pool;
    const int ye = cells.y0 + ((py + 1) * len_y + pool - 1) / pool;
    for (int px = 0; px < pool; ++px) {
      const int xs = cells.x0 + (px * len_x) / pool;
      const int xe = cells.x0 + ((px + 1) * len_x + pool - 1) / pool;
      for (int c = 0; c < k; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        int best_idx = -1;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) {
            const int idx = (c * fh + y) * fw + x;
            if (features.data[static_cast<std::size_t>(idx)] > best) {
              best = features.data[static_cast<std::size_t>(idx)];
              best_idx = idx;
            }
          }
        out.at(c, py, px) = best;
        if (cache) cache->argmax[static_cast<std::size_t>((c * pool + py) * pool + px)] = best_idx;
      }
    }
  }
  return out;
}

void roi_max_pool_backward(const RoiPoolCache& cache, std::span<const double> grad_out, Tensor& grad_features) {
  for (std::size_t i = 0; i < cache.argmax.size(); ++i)
    if (cache.argmax[i] >= 0) grad_features.data[static_cast<std::size_t>(cache.argmax[i])] += grad_out[i];
}

}  // namespace websod::nn
