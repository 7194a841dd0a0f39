// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace voxformer {

/// Extents of a dense row-major tensor. Rank 0 denotes a scalar.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 5;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims);
  explicit Shape(std::span<const std::int64_t> dims);

  [[nodiscard]] std::size_t rank() const noexcept { return rank_; }
  [[nodiscard]] std::int64_t operator[](std::size_t i) const { return dims_[i]; }
  [[nodiscard]] std::int64_t at(std::size_t i) const;
  /// Negative indices count from the back (-1 is the trailing axis).
  [[nodiscard]] std::int64_t axis(int i) const;
  [[nodiscard]] std::int64_t numel() const noexcept;
  [[nodiscard]] std::span<const std::int64_t> dims() const noexcept {
    return {dims_.data(), rank_};
  }
  [[nodiscard]] std::vector<std::int64_t> to_vector() const {
    return {dims_.begin(), dims_.begin() + static_cast<std::ptrdiff_t>(rank_)};
  }
  [[nodiscard]] std::string to_string() const;

  friend bool operator==(const Shape& a, const Shape& b) noexcept;

 private:
  std::array<std::int64_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

}  // namespace voxformer
