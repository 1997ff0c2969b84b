#pragma once

#include <span>
#include <string>
#include <vector>

#include "fieldrecon/tensor.hpp"

namespace fieldrecon {

inline constexpr const char* kStressTag = "vonmises_stress";
inline constexpr const char* kStrainTag = "strain";

/// One C x H x W grid of response values with a label per channel.
struct Field {
  Shape shape;
  std::vector<float> data;
  std::vector<std::string> channel_tags;

  Field() = default;
  explicit Field(Shape s, float fill = 0.0f, std::vector<std::string> tags = {});

  float& at(int c, int row, int col) {
    return data[static_cast<std::size_t>(c) * shape.plane() + static_cast<std::size_t>(row) * shape.width + col];
  }
  float at(int c, int row, int col) const {
    return data[static_cast<std::size_t>(c) * shape.plane() + static_cast<std::size_t>(row) * shape.width + col];
  }
  std::span<float> channel(int c) { return {data.data() + c * shape.plane(), shape.plane()}; }
  std::span<const float> channel(int c) const { return {data.data() + c * shape.plane(), shape.plane()}; }

  /// Single-channel copy of channel `c` (tag preserved).
  Field extract_channel(int c) const;
  /// Index of the channel carrying `tag`, or -1.
  int find_channel(const std::string& tag) const;
  bool all_finite() const;
};

/// Stacks fields of identical shape into a batch tensor.
template <typename T>
Tensor<T> to_tensor(std::span<const Field> fields);
template <typename T>
Tensor<T> to_tensor(const Field& field);
/// Splits sample `n` of a batch back into a field.
template <typename T>
Field to_field(const Tensor<T>& batch, int n, std::vector<std::string> tags = {});

}  // namespace fieldrecon
