#pragma once

#include <filesystem>

#include "websod/tensor.hpp"

namespace websod {

/// Reads an 8-bit PNG (gray, RGB or RGBA) into a 3 x H x W tensor in [0,1].
Tensor read_png(const std::filesystem::path& path);

/// Writes a 3 x H x W (RGB) or 1 x H x W (gray) tensor, values clamped to [0,1].
void write_png(const std::filesystem::path& path, const Tensor& image);

}  // namespace websod
