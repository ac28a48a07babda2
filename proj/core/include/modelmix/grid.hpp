#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "modelmix/tensor.hpp"

namespace modelmix {

/// Row-major 2-D raster.
template <typename T>
struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{}) : h(rows), w(cols), data(rows * cols, fill) {}

  T& at(std::size_t y, std::size_t x) { return data[y * w + x]; }
  const T& at(std::size_t y, std::size_t x) const { return data[y * w + x]; }
  std::size_t size() const { return data.size(); }
  bool same_dims(const Grid& o) const { return h == o.h && w == o.w; }
  template <typename U>
  bool same_dims(const Grid<U>& o) const {
    return h == o.h && w == o.w;
  }
  bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;
using LabelMap = Grid<std::uint8_t>;
using Mask = Grid<std::uint8_t>;

/// Per-pixel class ids with an UNLABELED sentinel equal to num_classes.
struct ScribbleMap {
  LabelMap labels;
  int num_classes = 0;

  ScribbleMap() = default;
  ScribbleMap(std::size_t h, std::size_t w, int classes)
      : labels(h, w, static_cast<std::uint8_t>(classes)), num_classes(classes) {}

  std::uint8_t unlabeled() const { return static_cast<std::uint8_t>(num_classes); }
  bool annotated(std::size_t i) const { return labels.data[i] != unlabeled(); }
  std::size_t annotated_count() const;
  /// Throws ContractViolation if any value lies outside [0, num_classes].
  void validate() const;
  bool operator==(const ScribbleMap&) const = default;
};

/// Stacks single-channel images into an (n, 1, h, w) tensor.
template <typename T>
Tensor4<T> stack_images(const std::vector<const Image*>& images);

extern template Tensor4<float> stack_images(const std::vector<const Image*>&);
extern template Tensor4<double> stack_images(const std::vector<const Image*>&);

}  // namespace modelmix
