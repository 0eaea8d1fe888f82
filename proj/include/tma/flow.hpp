#pragma once

#include <cstdint>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

// Dense per-pixel displacement field, x component first, plus validity mask.
struct FlowField {
  Tensor<float> values;        // [2,H,W]
  std::vector<uint8_t> valid;  // H*W, 0 or 1

  FlowField() = default;
  FlowField(int height, int width)
      : values(Tensor<float>({2, height, width})),
        valid(static_cast<size_t>(height) * width, 0) {}

  int height() const { return values.empty() ? 0 : values.dim(1); }
  int width() const { return values.empty() ? 0 : values.dim(2); }

  float u(int y, int x) const { return values.at(0, y, x); }
  float v(int y, int x) const { return values.at(1, y, x); }
  bool is_valid(int y, int x) const {
    return valid[static_cast<size_t>(y) * width() + x] != 0;
  }
};

}  // namespace tma
