#include "cdma/gemm.hpp"

namespace cdma::detail {

namespace {

template <class T>
void gemm_acc_impl(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<long>(i) * k;
    T* ci = c + static_cast<long>(i) * n;
    for (int p = 0; p < k; ++p) {
      T aip = ai[p];
      const T* bp = b + static_cast<long>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <class T>
void gemm_abt_impl(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<long>(i) * k;
    T* ci = c + static_cast<long>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<long>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

template <class T>
void gemm_atb_impl(int m, int n, int k, const T* a, const T* b, T* c) {
  for (int p = 0; p < k; ++p) {
    const T* ap = a + static_cast<long>(p) * m;
    const T* bp = b + static_cast<long>(p) * n;
    for (int i = 0; i < m; ++i) {
      T api = ap[i];
      T* ci = c + static_cast<long>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace

void gemm_acc(int m, int n, int k, const float* a, const float* b, float* c) {
  gemm_acc_impl(m, n, k, a, b, c);
}
void gemm_acc(int m, int n, int k, const double* a, const double* b,
              double* c) {
  gemm_acc_impl(m, n, k, a, b, c);
}
void gemm_abt(int m, int n, int k, const float* a, const float* b, float* c) {
  gemm_abt_impl(m, n, k, a, b, c);
}
void gemm_abt(int m, int n, int k, const double* a, const double* b,
              double* c) {
  gemm_abt_impl(m, n, k, a, b, c);
}
void gemm_atb(int m, int n, int k, const float* a, const float* b, float* c) {
  gemm_atb_impl(m, n, k, a, b, c);
}
void gemm_atb(int m, int n, int k, const double* a, const double* b,
              double* c) {
  gemm_atb_impl(m, n, k, a, b, c);
}

}  // namespace cdma::detail
