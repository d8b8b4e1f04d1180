#pragma once

// Shared containers and error type used by every softseg module.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace softseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major H×W array.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill) {
    if (height < 0 || width < 0) throw Error("Grid: negative dimension");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int row, int col) noexcept { return data_[index(row, col)]; }
  const T& operator()(int row, int col) const noexcept { return data_[index(row, col)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  template <typename U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }

  bool operator==(const Grid&) const = default;

 private:
  std::size_t index(int row, int col) const noexcept {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using Mask = Grid<std::uint8_t>;
using LabelGrid = Grid<int>;

/// Per-pixel distribution over classes, stored H×W×C (pixel-major).
class DistributionMap {
 public:
  DistributionMap() = default;
  DistributionMap(int height, int width, int classes, double fill = 0.0)
      : height_(height), width_(width), classes_(classes),
        data_(static_cast<std::size_t>(height) * width * classes, fill) {
    if (height < 0 || width < 0 || classes < 0) throw Error("DistributionMap: negative dimension");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int classes() const noexcept { return classes_; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }

  std::span<double> pixel(std::size_t i) noexcept {
    return {data_.data() + i * classes_, static_cast<std::size_t>(classes_)};
  }
  std::span<const double> pixel(std::size_t i) const noexcept {
    return {data_.data() + i * classes_, static_cast<std::size_t>(classes_)};
  }
  std::span<double> at(int row, int col) noexcept {
    return pixel(static_cast<std::size_t>(row) * width_ + col);
  }
  std::span<const double> at(int row, int col) const noexcept {
    return pixel(static_cast<std::size_t>(row) * width_ + col);
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  template <typename U>
  bool same_extent(const Grid<U>& g) const noexcept {
    return height_ == g.height() && width_ == g.width();
  }

  bool operator==(const DistributionMap&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int classes_ = 0;
  std::vector<double> data_;
};

inline int argmax(std::span<const double> v) noexcept {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

/// Index of the strictly largest entry, or -1 when the top two are within `tie_tol`.
inline int strict_argmax(std::span<const double> v, double tie_tol = 1e-9) noexcept {
  if (v.empty()) return -1;
  int best = argmax(v);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (static_cast<int>(i) != best && v[best] - v[i] <= tie_tol) return -1;
  return best;
}

}  // namespace softseg
