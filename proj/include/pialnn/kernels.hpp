#pragma once

#include <cstddef>

// Dense row-major kernels used by the network forward/backward passes.
//
// Every reduction runs in a fixed serial order per output element, so a
// result is identical for any thread count, and the OpenMP versions are
// bitwise equal to the serial references (the two share the same per-row
// worker and differ only in how rows are distributed).

namespace pialnn::kernels {

// C[n x m] = A[n x k] * B[k x m] + bias (bias may be nullptr; applied per row)
void gemm_nn(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m);

// C[n x m] += A[n x k] * B[k x m]
void gemm_nn_acc(const double* A, int lda, const double* B, int ldb, double* C,
                 int ldc, int n, int k, int m);

// C[n x m] = A[n x k] * B[m x k]^T + bias, i.e. C[r][j] = dot(A[r], B[j])
void gemm_nt(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m);

// C[p x q] += A[n x p]^T * B[n x q]
void gemm_tn_acc(const double* A, int lda, const double* B, int ldb,
                 double* C, int ldc, int n, int p, int q);

// out[j] += sum_r A[r][j]
void colsum_acc(const double* A, int lda, double* out, int n, int m);

// y = z if z >= 0 else slope*z (the subgradient at 0 is taken as 1)
void leaky_relu(const double* z, double* y, size_t count, double slope);

// dz = dy * (z >= 0 ? 1 : slope), using the pre-activation z
void leaky_relu_grad(const double* z, const double* dy, double* dz,
                     size_t count, double slope);

// Serial reference implementations, kept for testing and benchmarking the
// parallel versions against.
namespace serial {
void gemm_nn(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m);
void gemm_nn_acc(const double* A, int lda, const double* B, int ldb, double* C,
                 int ldc, int n, int k, int m);
void gemm_nt(const double* A, int lda, const double* B, int ldb,
             const double* bias, double* C, int ldc, int n, int k, int m);
void gemm_tn_acc(const double* A, int lda, const double* B, int ldb,
                 double* C, int ldc, int n, int p, int q);
void colsum_acc(const double* A, int lda, double* out, int n, int m);
void leaky_relu(const double* z, double* y, size_t count, double slope);
void leaky_relu_grad(const double* z, const double* dy, double* dz,
                     size_t count, double slope);
}  // namespace serial

}  // namespace pialnn::kernels
