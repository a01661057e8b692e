#pragma once

#include "websod/box.hpp"
#include "websod/layers.hpp"
#include "websod/tensor.hpp"

namespace websod {

/// K x H' x W' activations; `stride` is the input-to-feature resolution ratio.
struct FeatureMap {
  Tensor data;
  int stride = 1;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

struct RoI {
  Box box;
  double objectness = 0.0;
};

/// Feature cells covered by an image-space box projected onto a stride-`stride`
/// grid of size fh x fw. A box that covers no cell snaps to the cell holding its
/// center.
nn::CellRange covered_cells(const Box& box, int stride, int fh, int fw);

}  // namespace websod
