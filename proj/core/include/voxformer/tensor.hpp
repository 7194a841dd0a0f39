// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor handle with an attached reverse-mode graph.
//
// A Tensor is a cheap shared handle. Its payload is immutable once an
// operator has produced it; the only sanctioned in-place writes go through
// mutable_data(), which is reserved for initializers and optimizer steps on
// leaf parameters.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "voxformer/error.hpp"
#include "voxformer/shape.hpp"

namespace voxformer {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

[[nodiscard]] std::string_view dtype_name(DType dtype) noexcept;
[[nodiscard]] DType parse_dtype(std::string_view name);
[[nodiscard]] std::size_t dtype_size(DType dtype) noexcept;

template <class T>
inline constexpr DType dtype_of = std::is_same_v<T, float> ? DType::f32 : DType::f64;

/// Invokes `f.template operator()<T>()` with T = float or double.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return std::forward<F>(f).template operator()<float>();
  return std::forward<F>(f).template operator()<double>();
}

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

class Tensor;
struct Node;

/// Maps the gradient of an op's output to gradients of its inputs. Entries
/// for inputs that do not require a gradient may be left undefined.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Buffer> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor ones(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  /// Copies `values` (converted to `dtype`) into a new tensor.
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = DType::f32);
  template <class T>
  static Tensor from_vector(const Shape& shape, std::vector<T> values);

  [[nodiscard]] bool defined() const noexcept { return impl_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return impl_->shape; }
  [[nodiscard]] DType dtype() const { return impl_->dtype; }
  [[nodiscard]] std::int64_t numel() const { return impl_->shape.numel(); }
  [[nodiscard]] std::size_t rank() const { return impl_->shape.rank(); }

  template <class T>
  [[nodiscard]] std::span<const T> data() const;
  /// In-place access for initializers and optimizer updates only.
  template <class T>
  [[nodiscard]] std::span<T> mutable_data();

  [[nodiscard]] double item() const;
  [[nodiscard]] double value_at(std::int64_t flat_index) const;
  [[nodiscard]] std::vector<double> to_vector() const;

  /// True for grad-enabled leaves and for every tensor produced from one.
  [[nodiscard]] bool requires_grad() const;
  Tensor& set_requires_grad(bool enabled);
  [[nodiscard]] bool is_leaf() const { return impl_->grad_fn == nullptr; }
  [[nodiscard]] const std::shared_ptr<Node>& grad_fn() const { return impl_->grad_fn; }

  [[nodiscard]] bool has_grad() const { return impl_->grad != nullptr; }
  /// The accumulated gradient as a detached tensor sharing the grad buffer.
  [[nodiscard]] Tensor grad() const;
  void zero_grad();

  /// Same payload, no graph.
  [[nodiscard]] Tensor detach() const;
  /// Deep copy of the payload, no graph.
  [[nodiscard]] Tensor clone() const;
  /// Converted copy, no graph.
  [[nodiscard]] Tensor to(DType dtype) const;

  /// Reverse-mode sweep from this scalar; see autograd.cpp.
  void backward() const;

  [[nodiscard]] TensorImpl* impl() const noexcept { return impl_.get(); }
  [[nodiscard]] bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  static Tensor wrap(const Shape& shape, DType dtype, std::shared_ptr<Buffer> data);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct Node {
  std::string op;
  Shape output_shape;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool consumed = false;
};

/// Recording is on unless a NoGradGuard is alive on this thread.
[[nodiscard]] bool grad_mode_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Wraps a freshly computed payload.
template <class T>
Tensor make(const Shape& shape, std::vector<T> values) {
  return Tensor::wrap(shape, dtype_of<T>, std::make_shared<Buffer>(std::move(values)));
}

/// Attaches a graph node to `out` when recording is enabled and any input
/// requires a gradient. Returns `out` for chaining.
Tensor record(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn fn);

/// Accumulates `src` into the gradient buffer `dst` (allocating on first use).
void accumulate(std::shared_ptr<Buffer>& dst, const Tensor& src);

}  // namespace detail

template <class T>
Tensor Tensor::from_vector(const Shape& shape, std::vector<T> values) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("payload of " + std::to_string(values.size()) +
                     " elements does not match shape " + shape.to_string());
  }
  return detail::make<T>(shape, std::move(values));
}

template <class T>
std::span<const T> Tensor::data() const {
  if (impl_->dtype != dtype_of<T>) {
    throw Error(std::string("dtype mismatch: tensor holds ") +
                std::string(dtype_name(impl_->dtype)) + ", requested " +
                std::string(dtype_name(dtype_of<T>)));
  }
  const auto& v = std::get<std::vector<T>>(*impl_->data);
  return {v.data(), v.size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
  if (impl_->dtype != dtype_of<T>) {
    throw Error(std::string("dtype mismatch: tensor holds ") +
                std::string(dtype_name(impl_->dtype)) + ", requested " +
                std::string(dtype_name(dtype_of<T>)));
  }
  auto& v = std::get<std::vector<T>>(*impl_->data);
  return {v.data(), v.size()};
}

}  // namespace voxformer
