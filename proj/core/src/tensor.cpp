// SPDX-License-Identifier: Apache-2.0
#include "voxformer/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace voxformer {

std::string_view dtype_name(DType dtype) noexcept {
  return dtype == DType::f32 ? "f32" : "f64";
}

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw ConfigError("unknown dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype) noexcept { return dtype == DType::f32 ? 4 : 8; }

Tensor Tensor::wrap(const Shape& shape, DType dtype, std::shared_ptr<Buffer> data) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = shape;
  t.impl_->dtype = dtype;
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  return dispatch(dtype, [&]<typename T>() {
    return detail::make<T>(shape, std::vector<T>(static_cast<std::size_t>(shape.numel()),
                                                 static_cast<T>(value)));
  });
}

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return full(shape, 0.0, dtype); }
Tensor Tensor::ones(const Shape& shape, DType dtype) { return full(shape, 1.0, dtype); }
Tensor Tensor::scalar(double value, DType dtype) { return full(Shape{}, value, dtype); }

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("payload of " + std::to_string(values.size()) +
                     " elements does not match shape " + shape.to_string());
  }
  return dispatch(dtype, [&]<typename T>() {
    return detail::make<T>(shape, std::vector<T>(values.begin(), values.end()));
  });
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values, DType dtype) {
  return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, got shape " + shape().to_string());
  }
  return value_at(0);
}

double Tensor::value_at(std::int64_t flat_index) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(static_cast<std::size_t>(flat_index))); },
                    *impl_->data);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, *impl_->data);
}

bool Tensor::requires_grad() const { return impl_->requires_grad || impl_->grad_fn != nullptr; }

Tensor& Tensor::set_requires_grad(bool enabled) {
  if (!is_leaf()) throw GraphError("requires_grad can only be toggled on leaf tensors");
  impl_->requires_grad = enabled;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl_->grad) throw GraphError("tensor has no gradient; run backward() first");
  return wrap(impl_->shape, impl_->dtype, impl_->grad);
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const { return wrap(impl_->shape, impl_->dtype, impl_->data); }

Tensor Tensor::clone() const {
  return wrap(impl_->shape, impl_->dtype, std::make_shared<Buffer>(*impl_->data));
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == impl_->dtype) return clone();
  return dispatch(dtype, [&]<typename T>() {
    return std::visit(
        [&](const auto& v) { return detail::make<T>(impl_->shape, std::vector<T>(v.begin(), v.end())); },
        *impl_->data);
  });
}

namespace {
thread_local bool g_grad_mode = true;
}

bool grad_mode_enabled() noexcept { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

namespace detail {

Tensor record(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn fn) {
  if (!grad_mode_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->output_shape = out.shape();
  node->inputs = std::move(inputs);
  node->backward = std::move(fn);
  out.impl()->grad_fn = std::move(node);
  return out;
}

void accumulate(std::shared_ptr<Buffer>& dst, const Tensor& src) {
  dispatch(src.dtype(), [&]<typename T>() {
    auto s = src.data<T>();
    if (!dst) {
      dst = std::make_shared<Buffer>(std::vector<T>(s.begin(), s.end()));
      return;
    }
    auto& d = std::get<std::vector<T>>(*dst);
    if (d.size() != s.size()) throw ShapeError("gradient accumulation size mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

}  // namespace detail
}  // namespace voxformer
