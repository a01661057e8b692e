#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace websod {

/// Dense row-major tensor of doubles. Image and feature tensors use CHW layout.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, double fill = 0.0)
      : shape(std::move(dims)), data(count(shape), fill) {}

  static std::size_t count(const std::vector<int>& dims) {
    std::size_t n = 1;
    for (int d : dims) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // CHW accessors.
  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x]; }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  Tensor zeros_like() const { return Tensor(shape, 0.0); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

bool all_finite(const Tensor& t);

}  // namespace websod
