// SPDX-License-Identifier: Apache-2.0
//
// Stateless neural operators on [N, C, D, H, W] volumes and [N, T, E]
// token sequences. Layouts are row-major with W fastest.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "voxformer/rng.hpp"
#include "voxformer/tensor.hpp"

namespace voxformer::nn {

using Extents3 = std::array<std::int64_t, 3>;

struct Conv3dGeometry {
  Extents3 stride{1, 1, 1};
  Extents3 padding{0, 0, 0};
};

/// floor((L + 2p - k) / s) + 1 per axis; throws ShapeError when any result
/// would be < 1.
Extents3 conv_output_extents(const Extents3& input, const Extents3& kernel,
                             const Extents3& stride, const Extents3& padding,
                             const char* what = "conv3d");

/// Cross-correlation with zero padding. `weight` is [Cout, Cin, kd, kh, kw];
/// `bias` ([Cout]) may be undefined.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv3dGeometry& geometry);

struct Pool3dGeometry {
  Extents3 kernel{3, 3, 3};
  Extents3 stride{3, 3, 3};
  Extents3 padding{0, 0, 0};
};

struct MaxPoolResult {
  Tensor output;
  /// Flat input index of each output's maximum (first occurrence on ties).
  std::vector<std::int64_t> indices;
};

MaxPoolResult maxpool3d_with_indices(const Tensor& x, const Pool3dGeometry& geometry);
Tensor maxpool3d(const Tensor& x, const Pool3dGeometry& geometry);

/// PyTorch-style adaptive average pooling: bin i on an axis of length L
/// covers [floor(i L / O), ceil((i + 1) L / O)).
Tensor adaptive_avg_pool3d(const Tensor& x, const Extents3& output);

/// Running statistics owned by a batch-norm layer; updated in training mode.
struct RunningStats {
  Tensor mean;
  Tensor var;
  double momentum = 0.1;
};

/// Per-channel normalization over (N, D, H, W). Training mode uses batch
/// statistics (biased variance) and updates `stats` with the unbiased
/// variance; eval mode normalizes with `stats`.
Tensor batchnorm3d(const Tensor& x, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                   bool training, double eps = 1e-5);

/// Per-(sample, channel) normalization over (D, H, W), then per-channel affine.
Tensor instancenorm3d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Channel dropout: each (sample, channel) slice is zeroed with probability
/// p, survivors scaled by 1 / (1 - p). Identity when not training.
Tensor dropout3d(const Tensor& x, double p, bool training, Rng& rng);

/// x W^T + b over the trailing axis. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Normalization over the trailing axis followed by affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Max-shifted softmax over the trailing axis.
Tensor softmax(const Tensor& x);

/// Multi-head scaled dot-product attention on projected q, k, v ([N, T, E]).
/// Heads are contiguous E / num_heads slices; scale is 1 / sqrt(head_dim).
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    std::int64_t num_heads);

/// Mean negative log-likelihood of `labels` under softmax(logits), logits
/// [K, N]. Computed with log-sum-exp.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);

}  // namespace voxformer::nn
