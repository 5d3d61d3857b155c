#pragma once

#include "ptsm/tensor.hpp"

namespace ptsm::kernels {

/// C = alpha * op(A) @ op(B) + beta * C, row-major dense.
/// A is m x k after transposition, B is k x n, C is m x n.
void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, double alpha, const double* a, i64 lda,
          const double* b, i64 ldb, double beta, double* c, i64 ldc);

/// Unfold (N, C_in, T) into a (C_in*K, N*T) patch matrix for stride-1 padded
/// cross-correlation. Out-of-range taps are zero.
void im2col(const Tensor& x, i64 kernel, i64 pad, Tensor& col);

/// Scatter-add the patch-matrix gradient back to input layout.
void col2im(const Tensor& dcol, i64 n, i64 c_in, i64 t, i64 kernel, i64 pad, Tensor& dx);

/// True if the build is routing gemm through CBLAS.
bool using_cblas();

}  // namespace ptsm::kernels
