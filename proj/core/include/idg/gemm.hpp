#pragma once

#include <cstdint>

namespace idg::detail {

/// C (MxN) = A (MxK) * B (KxN), optionally accumulating into C.
/// All kernels parallelize over rows of C with a static partition, so each
/// output element is produced by exactly one thread in a fixed order and
/// results are bit-identical for any thread count.
template <typename T>
void mm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
#endif
    for (std::int64_t i = 0; i < M; ++i) {
        T* crow = C + i * N;
        if (!accumulate) {
            for (std::int64_t j = 0; j < N; ++j) crow[j] = T{0};
        }
        const T* arow = A + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T a = arow[k];
            const T* brow = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    }
}

/// C (MxN) = A (MxK) * B^T, with B stored as (NxK).
template <typename T>
void mm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
#endif
    for (std::int64_t i = 0; i < M; ++i) {
        const T* arow = A + i * K;
        T* crow = C + i * N;
        for (std::int64_t j = 0; j < N; ++j) {
            const T* brow = B + j * K;
            T acc{0};
            for (std::int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

/// C (MxN) = A^T * B, with A stored as (KxM) and B as (KxN).
template <typename T>
void mm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * N * K > 16384)
#endif
    for (std::int64_t i = 0; i < M; ++i) {
        T* crow = C + i * N;
        if (!accumulate) {
            for (std::int64_t j = 0; j < N; ++j) crow[j] = T{0};
        }
        for (std::int64_t k = 0; k < K; ++k) {
            const T a = A[k * M + i];
            const T* brow = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    }
}

}  // namespace idg::detail
