#include "vitplast/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

namespace vitplast::kernels {

namespace {

constexpr std::size_t kMr = 8;
#if defined(__AVX512F__)
constexpr std::size_t kNr = 16;
#else
constexpr std::size_t kNr = 8;
#endif

constexpr std::size_t kKc = 256;
constexpr std::size_t kMcPanels = 12;  // 96 rows

int g_thread_limit = 0;

int active_threads() {
  return g_thread_limit > 0 ? g_thread_limit : omp_get_max_threads();
}

// Panels of W rows of a row-major matrix, stored k-major:
// panel[p * W + r] = a[(i0 + r) * lda + p]. Used for A, and for B when B is
// the transpose of a row-major matrix.
template <std::size_t W>
void pack_rows(std::size_t m, std::size_t k, const double* a, std::size_t lda, double* out) {
  const std::size_t panels = (m + W - 1) / W;
  for (std::size_t ip = 0; ip < panels; ++ip) {
    double* dst = out + ip * k * W;
    const std::size_t i0 = ip * W;
    const std::size_t rows = std::min(W, m - i0);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t r = 0; r < W; ++r) {
        dst[p * W + r] = r < rows ? a[(i0 + r) * lda + p] : 0.0;
      }
    }
  }
}

// B panel is kNr columns stored k-major: panel[p * kNr + c].
void pack_b(std::size_t n, std::size_t k, const double* b, std::size_t ldb, double* out) {
  const std::size_t panels = (n + kNr - 1) / kNr;
  for (std::size_t jp = 0; jp < panels; ++jp) {
    double* dst = out + jp * k * kNr;
    const std::size_t j0 = jp * kNr;
    const std::size_t cols = std::min(kNr, n - j0);
    for (std::size_t p = 0; p < k; ++p) {
      const double* src = b + p * ldb + j0;
      for (std::size_t c = 0; c < kNr; ++c) dst[p * kNr + c] = c < cols ? src[c] : 0.0;
    }
  }
}

// Continues the running sums already in C unless `first`; splitting k into
// blocks therefore keeps the per-element summation order.
inline void micro_kernel(std::size_t k, const double* __restrict ap, const double* __restrict bp,
                         double* __restrict c, std::size_t ldc, std::size_t rows,
                         std::size_t cols, bool first) {
  double acc[kMr][kNr] = {};
  if (!first) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] = c[r * ldc + j];
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = bp + p * kNr;
    const double* acol = ap + p * kMr;
    for (std::size_t r = 0; r < kMr; ++r) {
      const double av = acol[r];
#pragma omp simd
      for (std::size_t j = 0; j < kNr; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] = acc[r][j];
  }
}

// k is processed in blocks of kKc and rows in groups of kMcPanels A
// panels, so the A block being reused stays in L2 while B panels stream
// past it; tiles walk A panels fastest for the same reason. With
// `lower_only`, tiles lying wholly above the diagonal are skipped.
void run_tiles(std::size_t m, std::size_t n, std::size_t k, const double* ap, const double* bp,
               double* c, std::size_t ldc, bool lower_only) {
  const std::size_t a_panels = (m + kMr - 1) / kMr;
  const std::size_t b_panels = (n + kNr - 1) / kNr;
  for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
    const std::size_t kc = std::min(kKc, k - p0);
    for (std::size_t ib = 0; ib < a_panels; ib += kMcPanels) {
      const std::size_t group = std::min(kMcPanels, a_panels - ib);
      const long tiles = static_cast<long>(group * b_panels);
#pragma omp parallel for schedule(static) num_threads(active_threads())
      for (long t = 0; t < tiles; ++t) {
        const std::size_t ip = ib + static_cast<std::size_t>(t) % group;
        const std::size_t jp = static_cast<std::size_t>(t) / group;
        const std::size_t i0 = ip * kMr;
        const std::size_t j0 = jp * kNr;
        if (lower_only && j0 >= i0 + kMr) continue;
        micro_kernel(kc, ap + ip * k * kMr + p0 * kMr, bp + jp * k * kNr + p0 * kNr,
                     c + i0 * ldc + j0, ldc, std::min(kMr, m - i0), std::min(kNr, n - j0),
                     p0 == 0);
      }
    }
  }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0);
    return;
  }
  if (m * n * k < 32768) {
    // Small products: packing costs more than it saves. Same per-element
    // summation order as the blocked path.
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      std::fill(crow, crow + n, 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * lda + p];
        const double* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    return;
  }
  const std::size_t a_panels = (m + kMr - 1) / kMr;
  const std::size_t b_panels = (n + kNr - 1) / kNr;
  std::vector<double> ap(a_panels * k * kMr);
  std::vector<double> bp(b_panels * k * kNr);
  pack_rows<kMr>(m, k, a, lda, ap.data());
  pack_b(n, k, b, ldb, bp.data());

  run_tiles(m, n, k, ap.data(), bp.data(), c, ldc, false);
}

void gram(std::size_t m, std::size_t k, const double* a, std::size_t lda, double* c,
          std::size_t ldc) {
  if (m == 0) return;
  if (k == 0 || m * m * k < 32768) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * a[j * lda + p];
        c[i * ldc + j] = acc;
      }
    }
  } else {
    const std::size_t a_panels = (m + kMr - 1) / kMr;
    const std::size_t b_panels = (m + kNr - 1) / kNr;
    std::vector<double> ap(a_panels * k * kMr);
    std::vector<double> bp(b_panels * k * kNr);
    pack_rows<kMr>(m, k, a, lda, ap.data());
    pack_rows<kNr>(m, k, a, lda, bp.data());
    run_tiles(m, m, k, ap.data(), bp.data(), c, ldc, true);
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) c[i * ldc + j] = c[j * ldc + i];
  }
}

void gemv(std::size_t m, std::size_t n, const double* a, const double* x, double* y) {
  const int threads = m * n < 65536 ? 1 : active_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long i = 0; i < static_cast<long>(m); ++i) {
    const double* row = a + static_cast<std::size_t>(i) * n;
    // Eight fixed lanes (j mod 8) so the loop vectorizes; lanes are then
    // combined in a fixed order, so the result is still reproducible.
    constexpr std::size_t kLanes = 8;
    double lane[kLanes] = {};
    const std::size_t body = n - n % kLanes;
    for (std::size_t j = 0; j < body; j += kLanes) {
#pragma omp simd
      for (std::size_t l = 0; l < kLanes; ++l) lane[l] += row[j + l] * x[j + l];
    }
    for (std::size_t j = body; j < n; ++j) lane[j - body] += row[j] * x[j];
    y[i] = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  }
}

void gemv_t(std::size_t m, std::size_t n, const double* a, const double* x, double* y) {
  // Column blocks are independent; rows are walked in order inside each block.
  constexpr std::size_t kBlock = 256;
  const long blocks = static_cast<long>((n + kBlock - 1) / kBlock);
  const int threads = m * n < 65536 ? 1 : active_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long blk = 0; blk < blocks; ++blk) {
    const std::size_t j0 = static_cast<std::size_t>(blk) * kBlock;
    const std::size_t j1 = std::min(n, j0 + kBlock);
    std::fill(y + j0, y + j1, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double xi = x[i];
      const double* row = a + i * n;
      for (std::size_t j = j0; j < j1; ++j) y[j] += xi * row[j];
    }
  }
}

void set_thread_limit(int threads) { g_thread_limit = std::max(0, threads); }

int thread_limit() { return active_threads(); }

bool configure_threads_from_env() {
  const char* env = std::getenv("PLASTICITY_THREADS");
  if (env == nullptr || *env == '\0') return true;
  char* end = nullptr;
  const long value = std::strtol(env, &end, 10);
  if (*end != '\0' || value < 0 || value > 4096) {
    set_thread_limit(0);
    return false;
  }
  set_thread_limit(static_cast<int>(value));
  return true;
}

}  // namespace vitplast::kernels

namespace vitplast::reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * lda + p] * b[p * ldb + j];
      c[i * ldc + j] = s;
    }
  }
}

void gemv(std::size_t m, std::size_t n, const double* a, const double* x, double* y) {
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * x[j];
    y[i] = s;
  }
}

double sum_of_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace vitplast::reference
