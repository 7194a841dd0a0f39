// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor primitives. Every function records a graph node when
// any operand requires a gradient (and recording is enabled).

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "voxformer/tensor.hpp"

namespace voxformer {

// Elementwise. `b` must have the same shape as `a` or hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);

/// max(kx, x) for k in (0, 1). The derivative at exactly 0 is taken as 1.
Tensor leaky_relu(const Tensor& x, double k);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

/// Sum / mean of all elements, as a rank-0 tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// [m,k] x [k,n] -> [m,n]; a may carry a leading batch axis [B,m,k].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Same payload under new extents; element count must match.
Tensor reshape(const Tensor& x, const Shape& shape);
/// Collapses axes [start_axis, rank) into one.
Tensor flatten(const Tensor& x, int start_axis = 0);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
/// Contiguous range [start, start + length) along `axis`.
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);

/// (before, after) zero padding for each of the three trailing axes.
using Pad3d = std::array<std::pair<std::int64_t, std::int64_t>, 3>;
Tensor pad3d(const Tensor& x, const Pad3d& pads);
/// Inverse of pad3d: drops the given amounts from the three trailing axes.
Tensor crop3d(const Tensor& x, const Pad3d& amounts);

/// x + b where b's shape equals the trailing axes of x.
Tensor add_broadcast(const Tensor& x, const Tensor& b);
/// Repeats a tensor with leading extent 1 `n` times along axis 0.
Tensor repeat_leading(const Tensor& x, std::int64_t n);

}  // namespace voxformer
