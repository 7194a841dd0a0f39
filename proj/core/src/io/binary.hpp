// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "voxformer/error.hpp"

namespace voxformer::io {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

/// Appends floating-point scalars as little-endian IEEE-754 words.
template <class T>
void put_scalars(std::vector<std::uint8_t>& out, std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, values.data(), values.size() * sizeof(T));
  } else {
    std::uint8_t* dst = out.data() + start;
    for (T v : values) {
      const U bits = std::bit_cast<U>(v);
      for (std::size_t i = 0; i < sizeof(U); ++i) *dst++ = static_cast<std::uint8_t>(bits >> (8 * i));
    }
  }
}

template <class T>
void get_scalars(const std::uint8_t* src, std::span<T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), src, values.size() * sizeof(T));
  } else {
    for (auto& v : values) {
      v = std::bit_cast<T>(get_le<U>(src));
      src += sizeof(U);
    }
  }
}

/// Bounds-checked cursor over an input buffer; failures raise `E`.
template <class E>
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) {
      throw E(what_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
              ", " + std::to_string(bytes_.size() - pos_) + " available)");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <class U>
  U le() {
    return get_le<U>(take(sizeof(U)));
  }
  [[nodiscard]] std::size_t position() const noexcept { return pos_; }
  [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace voxformer::io
