#include "fieldrecon/field.hpp"

#include <algorithm>
#include <cmath>

namespace fieldrecon {

Field::Field(Shape s, float fill, std::vector<std::string> tags)
    : shape(s), data(s.size(), fill), channel_tags(std::move(tags)) {
  if (s.channels < 1 || s.height < 1 || s.width < 1) {
    throw ShapeError("field extents must be positive, got " + s.str());
  }
  if (!channel_tags.empty() && static_cast<int>(channel_tags.size()) != s.channels) {
    throw ShapeError("one tag per channel required");
  }
}

Field Field::extract_channel(int c) const {
  if (c < 0 || c >= shape.channels) throw ShapeError("channel index out of range");
  Field out(Shape{1, shape.height, shape.width});
  std::ranges::copy(channel(c), out.data.begin());
  if (!channel_tags.empty()) out.channel_tags = {channel_tags[c]};
  return out;
}

int Field::find_channel(const std::string& tag) const {
  const auto it = std::ranges::find(channel_tags, tag);
  return it == channel_tags.end() ? -1 : static_cast<int>(it - channel_tags.begin());
}

bool Field::all_finite() const {
  return std::ranges::all_of(data, [](float v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> to_tensor(std::span<const Field> fields) {
  if (fields.empty()) return {};
  Tensor<T> out(static_cast<int>(fields.size()), fields.front().shape);
  for (std::size_t n = 0; n < fields.size(); ++n) {
    if (fields[n].shape != out.shape) throw ShapeError("fields in a batch must share a shape");
    std::ranges::transform(fields[n].data, out.sample(static_cast<int>(n)).begin(),
                           [](float v) { return static_cast<T>(v); });
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const Field& field) {
  return to_tensor<T>(std::span<const Field>(&field, 1));
}

template <typename T>
Field to_field(const Tensor<T>& batch, int n, std::vector<std::string> tags) {
  Field out(batch.shape, 0.0f, std::move(tags));
  std::ranges::transform(batch.sample(n), out.data.begin(), [](T v) { return static_cast<float>(v); });
  return out;
}

template Tensor<float> to_tensor<float>(std::span<const Field>);
template Tensor<double> to_tensor<double>(std::span<const Field>);
template Tensor<float> to_tensor<float>(const Field&);
template Tensor<double> to_tensor<double>(const Field&);
template Field to_field<float>(const Tensor<float>&, int, std::vector<std::string>);
template Field to_field<double>(const Tensor<double>&, int, std::vector<std::string>);

}  // namespace fieldrecon
