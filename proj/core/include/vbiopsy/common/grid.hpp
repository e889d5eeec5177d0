#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vbiopsy/common/error.hpp"

namespace vbiopsy {

using Vec3 = std::array<double, 3>;

struct Dims {
  std::int64_t x = 1;
  std::int64_t y = 1;
  std::int64_t z = 1;

  std::int64_t operator[](std::size_t axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  std::int64_t& operator[](std::size_t axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  std::size_t count() const { return static_cast<std::size_t>(x * y * z); }
  bool operator==(const Dims&) const = default;
};

/// Dense 3D grid stored x-fastest: index = x + nx * (y + ny * z).
template <typename T>
class Grid3D {
 public:
  using value_type = T;

  Grid3D() = default;
  explicit Grid3D(Dims dims, T fill = T{}) : dims_(dims), data_(checked_count(dims), fill) {}
  Grid3D(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    require(data_.size() == checked_count(dims), ErrorCode::InvalidArgument,
            "grid data size does not match dimensions");
  }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>(x + dims_.x * (y + dims_.y * z));
  }
  bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.x && y < dims_.y && z < dims_.z;
  }

  T& operator()(std::int64_t x, std::int64_t y, std::int64_t z) { return data_[index(x, y, z)]; }
  const T& operator()(std::int64_t x, std::int64_t y, std::int64_t z) const { return data_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool operator==(const Grid3D&) const = default;

 private:
  static std::size_t checked_count(const Dims& d) {
    require(d.x >= 1 && d.y >= 1 && d.z >= 1, ErrorCode::InvalidArgument,
            "grid dimensions must be >= 1 per axis");
    return d.count();
  }

  Dims dims_{};
  std::vector<T> data_;
};

using ScalarGrid = Grid3D<double>;
using LabelGrid = Grid3D<std::int16_t>;

}  // namespace vbiopsy
