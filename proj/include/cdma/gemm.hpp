#pragma once

// Small row-major matrix kernels used by conv2d and linear. Compiled in
// their own translation unit with reassociation enabled so the reduction
// loops vectorize; keep them free of any NaN-sensitive logic.

namespace cdma::detail {

// C[MxN] += A[MxK] * B[KxN]
void gemm_acc(int m, int n, int k, const float* a, const float* b, float* c);
void gemm_acc(int m, int n, int k, const double* a, const double* b,
              double* c);

// C[MxN] += A[MxK] * B[NxK]^T
void gemm_abt(int m, int n, int k, const float* a, const float* b, float* c);
void gemm_abt(int m, int n, int k, const double* a, const double* b,
              double* c);

// C[MxN] += A[KxM]^T * B[KxN]
void gemm_atb(int m, int n, int k, const float* a, const float* b, float* c);
void gemm_atb(int m, int n, int k, const double* a, const double* b,
              double* c);

}  // namespace cdma::detail
