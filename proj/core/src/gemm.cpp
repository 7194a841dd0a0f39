// SPDX-License-Identifier: Apache-2.0
#include "gemm.hpp"

#include <Eigen/Core>

#include "voxformer/parallel.hpp"

namespace voxformer::detail {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T, class LhsExpr, class RhsExpr>
void assign(MutMap<T>& out, const LhsExpr& lhs, const RhsExpr& rhs, T alpha, T beta) {
  if (beta == T(0)) {
    out.noalias() = alpha * (lhs * rhs);
  } else {
    if (beta != T(1)) out *= beta;
    out.noalias() += alpha * (lhs * rhs);
  }
}

template <class T>
void gemm_rows(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
               const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
               std::int64_t ldc) {
  MutMap<T> out(c, m, n, Eigen::OuterStride<>(ldc));
  if (k == 0) {
    if (beta == T(0)) out.setZero(); else out *= beta;
    return;
  }
  if (!trans_a && !trans_b) {
    assign<T>(out, ConstMap<T>(a, m, k, Eigen::OuterStride<>(lda)),
              ConstMap<T>(b, k, n, Eigen::OuterStride<>(ldb)), alpha, beta);
  } else if (trans_a && !trans_b) {
    assign<T>(out, ConstMap<T>(a, k, m, Eigen::OuterStride<>(lda)).transpose(),
              ConstMap<T>(b, k, n, Eigen::OuterStride<>(ldb)), alpha, beta);
  } else if (!trans_a && trans_b) {
    assign<T>(out, ConstMap<T>(a, m, k, Eigen::OuterStride<>(lda)),
              ConstMap<T>(b, n, k, Eigen::OuterStride<>(ldb)).transpose(), alpha, beta);
  } else {
    assign<T>(out, ConstMap<T>(a, k, m, Eigen::OuterStride<>(lda)).transpose(),
              ConstMap<T>(b, n, k, Eigen::OuterStride<>(ldb)).transpose(), alpha, beta);
  }
}

}  // namespace

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  if (m == 0 || n == 0) return;
  if (num_threads() <= 1 || m < 2 * num_threads()) {
    gemm_rows(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
    const T* a_block = trans_a ? a + r0 : a + r0 * lda;
    gemm_rows(trans_a, trans_b, r1 - r0, n, k, alpha, a_block, lda, b, ldb, beta, c + r0 * ldc, ldc);
  });
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, float, const float*,
                          std::int64_t, const float*, std::int64_t, float, float*, std::int64_t);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, double,
                           const double*, std::int64_t, const double*, std::int64_t, double,
                           double*, std::int64_t);

}  // namespace voxformer::detail
