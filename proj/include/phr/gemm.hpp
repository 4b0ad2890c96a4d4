#pragma once

#include <algorithm>
#include <vector>

#include "phr/common.hpp"
#include "phr/parallel.hpp"

namespace phr {

// GEMM kernels for the conv / attention hot paths, blocked four output rows
// at a time so the streamed operand is reused from cache. Accumulation order
// over k is fixed per output element and each element is written by exactly
// one worker, which keeps results bit-stable across thread counts.

namespace detail {
// below this many multiply-accumulates the pool dispatch costs more than it saves
constexpr i64 kGemmParallelCutoff = 1 << 20;
constexpr i64 kGemmNTile = 1024;

template <class Fn>
void gemm_blocks(i64 blocks, i64 work, Fn&& fn) {
    if (work < kGemmParallelCutoff) {
        for (i64 b = 0; b < blocks; ++b) fn(b);
    } else {
        parallel_for(blocks, fn);
    }
}
}  // namespace detail

/// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void gemm_nn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate) {
    i64 blocks = (M + 3) / 4;
    detail::gemm_blocks(blocks, M * N * K, [&](i64 blk) {
        i64 m0 = blk * 4;
        i64 mrows = std::min<i64>(4, M - m0);
        T* crow[4];
        const T* arow[4];
        for (i64 r = 0; r < mrows; ++r) {
            crow[r] = C + (m0 + r) * N;
            arow[r] = A + (m0 + r) * K;
            if (!accumulate)
                for (i64 n = 0; n < N; ++n) crow[r][n] = T(0);
        }
        for (i64 n0 = 0; n0 < N; n0 += detail::kGemmNTile) {
            i64 nb = std::min(detail::kGemmNTile, N - n0);
            for (i64 k = 0; k < K; ++k) {
                const T* brow = B + k * N + n0;
                if (mrows == 4) {
                    T a0 = arow[0][k], a1 = arow[1][k], a2 = arow[2][k], a3 = arow[3][k];
                    if (a0 == T(0) && a1 == T(0) && a2 == T(0) && a3 == T(0)) continue;
                    T* c0 = crow[0] + n0;
                    T* c1 = crow[1] + n0;
                    T* c2 = crow[2] + n0;
                    T* c3 = crow[3] + n0;
                    for (i64 n = 0; n < nb; ++n) {
                        T b = brow[n];
                        c0[n] += a0 * b;
                        c1[n] += a1 * b;
                        c2[n] += a2 * b;
                        c3[n] += a3 * b;
                    }
                } else {
                    for (i64 r = 0; r < mrows; ++r) {
                        T a = arow[r][k];
                        if (a == T(0)) continue;
                        T* c = crow[r] + n0;
                        for (i64 n = 0; n < nb; ++n) c[n] += a * brow[n];
                    }
                }
            }
        }
    });
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T  (dot products of contiguous rows)
template <class T>
void gemm_nt(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate) {
    i64 blocks = (M + 3) / 4;
    detail::gemm_blocks(blocks, M * N * K, [&](i64 blk) {
        i64 m0 = blk * 4;
        i64 mrows = std::min<i64>(4, M - m0);
        const T* arow[4];
        for (i64 r = 0; r < mrows; ++r) arow[r] = A + (m0 + r) * K;
        for (i64 n = 0; n < N; ++n) {
            const T* brow = B + n * K;
            T acc[4] = {T(0), T(0), T(0), T(0)};
            if (mrows == 4) {
                const T* a0 = arow[0];
                const T* a1 = arow[1];
                const T* a2 = arow[2];
                const T* a3 = arow[3];
                for (i64 k = 0; k < K; ++k) {
                    T b = brow[k];
                    acc[0] += a0[k] * b;
                    acc[1] += a1[k] * b;
                    acc[2] += a2[k] * b;
                    acc[3] += a3[k] * b;
                }
            } else {
                for (i64 r = 0; r < mrows; ++r) {
                    T s = T(0);
                    for (i64 k = 0; k < K; ++k) s += arow[r][k] * brow[k];
                    acc[r] = s;
                }
            }
            for (i64 r = 0; r < mrows; ++r) {
                T* c = C + (m0 + r) * N + n;
                *c = accumulate ? *c + acc[r] : acc[r];
            }
        }
    });
}

/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(i64 M, i64 N, i64 K, const T* A, const T* B, T* C, bool accumulate) {
    i64 blocks = (M + 3) / 4;
    detail::gemm_blocks(blocks, M * N * K, [&](i64 blk) {
        i64 m0 = blk * 4;
        i64 mrows = std::min<i64>(4, M - m0);
        T* crow[4];
        for (i64 r = 0; r < mrows; ++r) {
            crow[r] = C + (m0 + r) * N;
            if (!accumulate)
                for (i64 n = 0; n < N; ++n) crow[r][n] = T(0);
        }
        for (i64 n0 = 0; n0 < N; n0 += detail::kGemmNTile) {
            i64 nb = std::min(detail::kGemmNTile, N - n0);
            for (i64 k = 0; k < K; ++k) {
                const T* brow = B + k * N + n0;
                const T* acol = A + k * M + m0;
                if (mrows == 4) {
                    T a0 = acol[0], a1 = acol[1], a2 = acol[2], a3 = acol[3];
                    if (a0 == T(0) && a1 == T(0) && a2 == T(0) && a3 == T(0)) continue;
                    T* c0 = crow[0] + n0;
                    T* c1 = crow[1] + n0;
                    T* c2 = crow[2] + n0;
                    T* c3 = crow[3] + n0;
                    for (i64 n = 0; n < nb; ++n) {
                        T b = brow[n];
                        c0[n] += a0 * b;
                        c1[n] += a1 * b;
                        c2[n] += a2 * b;
                        c3[n] += a3 * b;
                    }
                } else {
                    for (i64 r = 0; r < mrows; ++r) {
                        T a = acol[r];
                        if (a == T(0)) continue;
                        T* c = crow[r] + n0;
                        for (i64 n = 0; n < nb; ++n) c[n] += a * brow[n];
                    }
                }
            }
        }
    });
}

}  // namespace phr
