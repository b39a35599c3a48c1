#pragma once

#include <cstddef>
#include <span>

// Dense kernels. Everything under `kernels` may run on several OpenMP
// threads; everything under `reference` is a plain serial loop nest kept as
// the oracle for the parallel versions and as the baseline in the benchmark.
//
// Each output element of gemm is accumulated by one thread in increasing k
// order, so results do not depend on the thread count or schedule.

namespace vitplast::kernels {

// C[m x n] = A[m x k] * B[k x n]; row-major with leading dimensions.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc);

// C[m x m] = A A^T for row-major A[m x k]. Only the lower triangle is
// computed; the upper one is mirrored, so C is exactly symmetric.
void gram(std::size_t m, std::size_t k, const double* a, std::size_t lda, double* c,
          std::size_t ldc);

// y = A x for row-major A[m x n].
void gemv(std::size_t m, std::size_t n, const double* a, const double* x, double* y);

// y = A^T x for row-major A[m x n] (y has n entries).
void gemv_t(std::size_t m, std::size_t n, const double* a, const double* x, double* y);

// Worker cap for all parallel regions; 0 restores the OpenMP default.
void set_thread_limit(int threads);
int thread_limit();

// Reads PLASTICITY_THREADS (0 or unset = auto) and applies it. A value that
// is not a non-negative integer leaves the default in place and returns false.
bool configure_threads_from_env();

}  // namespace vitplast::kernels

namespace vitplast::reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc);

void gemv(std::size_t m, std::size_t n, const double* a, const double* x, double* y);

double sum_of_squares(std::span<const double> v);

}  // namespace vitplast::reference
