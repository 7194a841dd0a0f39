// SPDX-License-Identifier: Apache-2.0
#include "voxformer/shape.hpp"

#include <algorithm>

#include "voxformer/error.hpp"

namespace voxformer {

Shape::Shape(std::initializer_list<std::int64_t> dims)
    : Shape(std::span<const std::int64_t>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const std::int64_t> dims) {
  if (dims.size() > kMaxRank) {
    throw ShapeError("tensor rank " + std::to_string(dims.size()) + " exceeds maximum of 5");
  }
  for (auto d : dims) {
    if (d < 1) {
      std::string s = "[";
      for (std::size_t i = 0; i < dims.size(); ++i) {
        s += (i ? "," : "") + std::to_string(dims[i]);
      }
      throw ShapeError("tensor extents must be >= 1, got " + s + "]");
    }
  }
  std::copy(dims.begin(), dims.end(), dims_.begin());
  rank_ = dims.size();
}

std::int64_t Shape::at(std::size_t i) const {
  if (i >= rank_) {
    throw ShapeError("axis " + std::to_string(i) + " out of range for shape " + to_string());
  }
  return dims_[i];
}

std::int64_t Shape::axis(int i) const {
  const int r = static_cast<int>(rank_);
  const int a = i < 0 ? r + i : i;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(i) + " out of range for shape " + to_string());
  }
  return dims_[static_cast<std::size_t>(a)];
}

std::int64_t Shape::numel() const noexcept {
  std::int64_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::string Shape::to_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) s += ",";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

bool operator==(const Shape& a, const Shape& b) noexcept {
  return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
}

}  // namespace voxformer
