#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fieldrecon/errors.hpp"

namespace fieldrecon {

/// Channel-height-width extents of one sample.
struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return plane() * channels; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

/// Dense N x C x H x W batch, row-major per channel.
template <typename T>
struct Tensor {
  int batch = 0;
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n, Shape s, T fill = T(0))
      : batch(n), shape(s), data(static_cast<std::size_t>(n) * s.size(), fill) {}

  std::size_t sample_size() const { return shape.size(); }
  std::span<T> sample(int n) {
    return {data.data() + static_cast<std::size_t>(n) * shape.size(), shape.size()};
  }
  std::span<const T> sample(int n) const {
    return {data.data() + static_cast<std::size_t>(n) * shape.size(), shape.size()};
  }
  T* plane(int n, int c) {
    return data.data() + static_cast<std::size_t>(n) * shape.size() +
           static_cast<std::size_t>(c) * shape.plane();
  }
  const T* plane(int n, int c) const {
    return data.data() + static_cast<std::size_t>(n) * shape.size() +
           static_cast<std::size_t>(c) * shape.plane();
  }
  bool same_extent(const Tensor& o) const { return batch == o.batch && shape == o.shape; }
};

template <typename T>
inline void require_same_extent(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_extent(b)) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.batch) + "x" + a.shape.str() +
                     " vs " + std::to_string(b.batch) + "x" + b.shape.str());
  }
}

}  // namespace fieldrecon
