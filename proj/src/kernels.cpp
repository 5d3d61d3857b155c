#include "ptsm/kernels.hpp"

#include "ptsm/errors.hpp"

#ifdef PTSM_USE_CBLAS
extern "C" {
typedef enum { CblasRowMajor = 101 } CBLAS_LAYOUT_;
typedef enum { CblasNoTrans = 111, CblasTrans = 112 } CBLAS_TRANSPOSE_;
void cblas_dgemm(int layout, int trans_a, int trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta, double* c,
                 int ldc);
}
#endif

namespace ptsm::kernels {

bool using_cblas() {
#ifdef PTSM_USE_CBLAS
  return true;
#else
  return false;
#endif
}

void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, double alpha, const double* a, i64 lda,
          const double* b, i64 ldb, double beta, double* c, i64 ldc) {
#ifdef PTSM_USE_CBLAS
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
#else
  for (i64 i = 0; i < m; ++i) {
    for (i64 j = 0; j < n; ++j) {
      double acc = 0.0;
      for (i64 p = 0; p < k; ++p) {
        double av = trans_a ? a[p * lda + i] : a[i * lda + p];
        double bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + (beta == 0.0 ? 0.0 : beta * c[i * ldc + j]);
    }
  }
#endif
}

void im2col(const Tensor& x, i64 kernel, i64 pad, Tensor& col) {
  const i64 n = x.dim(0), c_in = x.dim(1), t = x.dim(2);
  col = Tensor({c_in * kernel, n * t});
  const double* xd = x.data();
  double* cd = col.data();
  for (i64 ci = 0; ci < c_in; ++ci) {
    for (i64 kk = 0; kk < kernel; ++kk) {
      double* row = cd + (ci * kernel + kk) * (n * t);
      for (i64 b = 0; b < n; ++b) {
        const double* xrow = xd + (b * c_in + ci) * t;
        double* out = row + b * t;
        const i64 shift = kk - pad;  // input index = output index + shift
        i64 lo = std::max<i64>(0, -shift);
        i64 hi = std::min<i64>(t, t - shift);
        for (i64 p = 0; p < lo; ++p) out[p] = 0.0;
        for (i64 p = lo; p < hi; ++p) out[p] = xrow[p + shift];
        for (i64 p = hi; p < t; ++p) out[p] = 0.0;
      }
    }
  }
}

void col2im(const Tensor& dcol, i64 n, i64 c_in, i64 t, i64 kernel, i64 pad, Tensor& dx) {
  dx = Tensor({n, c_in, t});
  const double* cd = dcol.data();
  double* xd = dx.data();
  for (i64 ci = 0; ci < c_in; ++ci) {
    for (i64 kk = 0; kk < kernel; ++kk) {
      const double* row = cd + (ci * kernel + kk) * (n * t);
      const i64 shift = kk - pad;
      for (i64 b = 0; b < n; ++b) {
        double* xrow = xd + (b * c_in + ci) * t;
        const double* in = row + b * t;
        i64 lo = std::max<i64>(0, -shift);
        i64 hi = std::min<i64>(t, t - shift);
        for (i64 p = lo; p < hi; ++p) xrow[p + shift] += in[p];
      }
    }
  }
}

}  // namespace ptsm::kernels
