// SPDX-License-Identifier: Apache-2.0
//
// Row-major GEMM on raw buffers, backed by Eigen maps:
//   C[m x n] = alpha * op(A) * op(B) + beta * C
// op(A) is m x k (A stored k x m when trans_a); op(B) is k x n.
// beta == 0 never reads C.

#pragma once

#include <cstdint>

namespace voxformer::detail {

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

}  // namespace voxformer::detail
