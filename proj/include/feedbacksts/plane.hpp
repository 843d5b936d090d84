#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fsts {

/// Row-major single-channel image.
template <typename T>
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Plane() = default;
  Plane(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}

  T& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  const T& at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  size_t size() const { return data.size(); }
  bool same_shape(const Plane& o) const { return height == o.height && width == o.width; }
  template <typename U>
  bool same_shape(const Plane<U>& o) const {
    return height == o.height && width == o.width;
  }

  std::span<T> pixels() { return data; }
  std::span<const T> pixels() const { return data; }

  bool operator==(const Plane&) const = default;
};

using FloatPlane = Plane<float>;
using MaskPlane = Plane<uint8_t>;

}  // namespace fsts
