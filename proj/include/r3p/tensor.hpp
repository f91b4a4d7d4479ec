#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "r3p/common.hpp"

namespace r3p {

// Dense channel-major (C x H x W) grid of doubles. Used for images, feature
// maps and single-channel heatmaps alike.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        values(static_cast<std::size_t>(c) * h * w, fill) {
    require(c >= 0 && h >= 0 && w >= 0, "negative tensor extent");
  }

  std::size_t size() const { return values.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  double& operator()(int c, int y, int x) {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double operator()(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::span<double> channel(int c) {
    return {values.data() + c * plane(), plane()};
  }
  std::span<const double> channel(int c) const {
    return {values.data() + c * plane(), plane()};
  }

  bool same_shape(const Tensor& other) const {
    return channels == other.channels && height == other.height &&
           width == other.width;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Single-channel H x W grid stored row-major.
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  double& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double operator()(int y, int x) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

}  // namespace r3p
