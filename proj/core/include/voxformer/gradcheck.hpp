// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxformer/tensor.hpp"

namespace voxformer {

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  /// Denominator floor for the relative error, so coordinates whose true
  /// derivative is ~0 are judged by absolute error instead.
  double denom_floor = 1e-6;
  /// Check only this many randomly chosen coordinates per input.
  std::optional<std::size_t> coords_per_input;
  std::uint64_t seed = 0;
};

struct CoordinateResult {
  std::size_t input = 0;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::vector<CoordinateResult> coords;
  [[nodiscard]] std::string summary() const;
};

using TensorFunction = std::function<Tensor(std::span<const Tensor>)>;

/// Compares reverse-mode gradients against central differences.
///
/// `inputs` must be f64 leaves; their payloads are perturbed in place and
/// restored bit-for-bit. A non-scalar output is reduced with a fixed random
/// projection so the whole Jacobian participates. Throws NumericError on a
/// non-finite evaluation.
GradcheckReport gradcheck(const TensorFunction& f, std::vector<Tensor> inputs,
                          const GradcheckOptions& options = {});

}  // namespace voxformer
