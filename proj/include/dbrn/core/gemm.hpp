#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace dbrn {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// c = a(M,K) * b(K,N), optionally accumulating into c.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc = false) {
    ECMap<T> A(a, M, K), B(b, K, N);
    EMap<T> C(c, M, N);
    if (acc)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// c = a(M,K) * b(N,K)^T -> (M,N)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc = false) {
    ECMap<T> A(a, M, K), B(b, N, K);
    EMap<T> C(c, M, N);
    if (acc)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// c = a(K,M)^T * b(K,N) -> (M,N)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N, bool acc = false) {
    ECMap<T> A(a, K, M), B(b, K, N);
    EMap<T> C(c, M, N);
    if (acc)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

} // namespace dbrn
