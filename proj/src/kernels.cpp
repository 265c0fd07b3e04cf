#include "pialnn/kernels.hpp"

#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define PIALNN_USE_AVX2 1
#endif

namespace pialnn::kernels {

namespace {

constexpr int kRowTile = 6;
constexpr int kColTile = 8;

// One (rows x kColTile) block of C for rows [r0, r0+rows). a_rs/a_ks are the
// strides of the left operand per output row / per k step, which lets the
// same core serve both A*B and A^T*B shapes. B columns must be contiguous.
// mode: 0 = init from bias (nullptr -> zero), 1 = accumulate into C.
template <int ROWS>
inline void block_colmajor(const double* a, long a_rs, long a_ks,
                           const double* b, long b_ks, const double* bias,
                           double* c, long c_rs, int k, int j0, int mode) {
#ifdef PIALNN_USE_AVX2
  __m256d acc[ROWS][2];
  for (int r = 0; r < ROWS; ++r) {
    if (mode == 1) {
      acc[r][0] = _mm256_loadu_pd(c + r * c_rs + j0);
      acc[r][1] = _mm256_loadu_pd(c + r * c_rs + j0 + 4);
    } else if (bias) {
      acc[r][0] = _mm256_loadu_pd(bias + j0);
      acc[r][1] = _mm256_loadu_pd(bias + j0 + 4);
    } else {
      acc[r][0] = _mm256_setzero_pd();
      acc[r][1] = _mm256_setzero_pd();
    }
  }
  for (int kk = 0; kk < k; ++kk) {
    const double* brow = b + kk * b_ks + j0;
    __m256d b0 = _mm256_loadu_pd(brow);
    __m256d b1 = _mm256_loadu_pd(brow + 4);
    for (int r = 0; r < ROWS; ++r) {
      __m256d av = _mm256_set1_pd(a[r * a_rs + kk * a_ks]);
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    _mm256_storeu_pd(c + r * c_rs + j0, acc[r][0]);
    _mm256_storeu_pd(c + r * c_rs + j0 + 4, acc[r][1]);
  }
#else
  double acc[ROWS][kColTile];
  for (int r = 0; r < ROWS; ++r)
    for (int j = 0; j < kColTile; ++j)
      acc[r][j] = mode == 1 ? c[r * c_rs + j0 + j] : (bias ? bias[j0 + j] : 0.0);
  for (int kk = 0; kk < k; ++kk) {
    const double* brow = b + kk * b_ks + j0;
    for (int r = 0; r < ROWS; ++r) {
      const double av = a[r * a_rs + kk * a_ks];
      for (int j = 0; j < kColTile; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < ROWS; ++r)
    for (int j = 0; j < kColTile; ++j) c[r * c_rs + j0 + j] = acc[r][j];
#endif
}

// Scalar path for column/row tails; the per-element k order matches the
// blocked path (ascending k), so tiling never changes results.
inline void scalar_cell(const double* a, long a_rs, long a_ks, const double* b,
                        long b_ks, const double* bias, double* c, long c_rs,
                        int k, int r, int j, int mode) {
  double acc = mode == 1 ? c[r * c_rs + j] : (bias ? bias[j] : 0.0);
  const double* ar = a + r * a_rs;
  for (int kk = 0; kk < k; ++kk) acc += ar[kk * a_ks] * b[kk * b_ks + j];
  c[r * c_rs + j] = acc;
}

// Rows [r0, r1) of the generalized product.
void gemm_rows(const double* a, long a_rs, long a_ks, const double* b,
               long b_ks, const double* bias, double* c, long c_rs, int k,
               int m, int r0, int r1, int mode) {
  const int mb = m - m % kColTile;
  int r = r0;
  for (; r + kRowTile <= r1; r += kRowTile) {
    for (int j = 0; j + kColTile <= m; j += kColTile)
      block_colmajor<kRowTile>(a + r * a_rs, a_rs, a_ks, b, b_ks, bias,
                               c + r * c_rs, c_rs, k, j, mode);
    for (int j = mb; j < m; ++j)
      for (int rr = r; rr < r + kRowTile; ++rr)
        scalar_cell(a, a_rs, a_ks, b, b_ks, bias, c, c_rs, k, rr, j, mode);
  }
  for (; r < r1; ++r) {
    for (int j = 0; j + kColTile <= m; j += kColTile)
      block_colmajor<1>(a + r * a_rs, a_rs, a_ks, b, b_ks, bias, c + r * c_rs,
                        c_rs, k, j, mode);
    for (int j = mb; j < m; ++j)
      scalar_cell(a, a_rs, a_ks, b, b_ks, bias, c, c_rs, k, r, j, mode);
  }
}

inline bool parallel_worth(long long flops) { return flops >= 1 << 18; }

void gemm_dispatch(const double* a, long a_rs, long a_ks, const double* b,
                   long b_ks, const double* bias, double* c, long c_rs, int k,
                   int m, int nrows, int mode, bool parallel) {
  if (parallel && parallel_worth(2LL * nrows * k * m)) {
#pragma omp parallel for schedule(static)
    for (int t = 0; t < (nrows + kRowTile - 1) / kRowTile; ++t) {
      int r0 = t * kRowTile;
      int r1 = r0 + kRowTile < nrows ? r0 + kRowTile : nrows;
      gemm_rows(a, a_rs, a_ks, b, b_ks, bias, c, c_rs, k, m, r0, r1, mode);
    }
  } else {
    gemm_rows(a, a_rs, a_ks, b, b_ks, bias, c, c_rs, k, m, 0, nrows, mode);
  }
}

std::vector<double>& transpose_scratch() {
  thread_local std::vector<double> buf;
  return buf;
}

void colsum_rows(const double* A, int lda, double* out, int n, int j0,
                 int j1) {
  for (int j = j0; j < j1; ++j) {
    double acc = out[j];
    for (int r = 0; r < n; ++r) acc += A[(long)r * lda + j];
    out[j] = acc;
  }
}

}  // namespace

void gemm_nn(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m) {
  gemm_dispatch(A, lda, 1, B, ldb, bias, C, ldc, k, m, n, 0, true);
}

void gemm_nn_acc(const double* A, int lda, const double* B, int ldb, double* C,
                 int ldc, int n, int k, int m) {
  gemm_dispatch(A, lda, 1, B, ldb, nullptr, C, ldc, k, m, n, 1, true);
}

void gemm_tn_acc(const double* A, int lda, const double* B, int ldb,
                 double* C, int ldc, int n, int p, int q) {
  gemm_dispatch(A, 1, lda, B, ldb, nullptr, C, ldc, n, q, p, 1, true);
}

void gemm_nt(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m) {
  auto& bt = transpose_scratch();
  if (bt.size() < (size_t)k * m) bt.resize((size_t)k * m);
  for (int j = 0; j < m; ++j)
    for (int kk = 0; kk < k; ++kk) bt[(size_t)kk * m + j] = B[(long)j * ldb + kk];
  gemm_dispatch(A, lda, 1, bt.data(), m, bias, C, ldc, k, m, n, 0, true);
}

void colsum_acc(const double* A, int lda, double* out, int n, int m) {
  if (parallel_worth((long long)n * m) && m >= 32) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < m; ++j) colsum_rows(A, lda, out, n, j, j + 1);
  } else {
    colsum_rows(A, lda, out, n, 0, m);
  }
}

void leaky_relu(const double* z, double* y, size_t count, double slope) {
#pragma omp parallel for schedule(static) if (count >= 1 << 16)
  for (long i = 0; i < (long)count; ++i)
    y[i] = z[i] >= 0.0 ? z[i] : slope * z[i];
}

void leaky_relu_grad(const double* z, const double* dy, double* dz,
                     size_t count, double slope) {
#pragma omp parallel for schedule(static) if (count >= 1 << 16)
  for (long i = 0; i < (long)count; ++i)
    dz[i] = z[i] >= 0.0 ? dy[i] : slope * dy[i];
}

namespace serial {

void gemm_nn(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m) {
  gemm_dispatch(A, lda, 1, B, ldb, bias, C, ldc, k, m, n, 0, false);
}

void gemm_nn_acc(const double* A, int lda, const double* B, int ldb, double* C,
                 int ldc, int n, int k, int m) {
  gemm_dispatch(A, lda, 1, B, ldb, nullptr, C, ldc, k, m, n, 1, false);
}

void gemm_tn_acc(const double* A, int lda, const double* B, int ldb,
                 double* C, int ldc, int n, int p, int q) {
  gemm_dispatch(A, 1, lda, B, ldb, nullptr, C, ldc, n, q, p, 1, false);
}

void gemm_nt(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m) {
  auto& bt = transpose_scratch();
  if (bt.size() < (size_t)k * m) bt.resize((size_t)k * m);
  for (int j = 0; j < m; ++j)
    for (int kk = 0; kk < k; ++kk) bt[(size_t)kk * m + j] = B[(long)j * ldb + kk];
  gemm_dispatch(A, lda, 1, bt.data(), m, bias, C, ldc, k, m, n, 0, false);
}

void colsum_acc(const double* A, int lda, double* out, int n, int m) {
  colsum_rows(A, lda, out, n, 0, m);
}

void leaky_relu(const double* z, double* y, size_t count, double slope) {
  for (size_t i = 0; i < count; ++i)
    y[i] = z[i] >= 0.0 ? z[i] : slope * z[i];
}

void leaky_relu_grad(const double* z, const double* dy, double* dz,
                     size_t count, double slope) {
  for (size_t i = 0; i < count; ++i)
    dz[i] = z[i] >= 0.0 ? dy[i] : slope * dy[i];
}

}  // namespace serial

}  // namespace pialnn::kernels
