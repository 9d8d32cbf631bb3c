#include "sbn/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cstdlib>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sbn::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 64;

// Rows [i0, i0 + rows) of C = A * B, columns [j0, j0 + cols). The k loop runs
// in ascending order for every output element.
template <std::size_t Rows>
inline void micro_nn(const float* a, const float* b, float* c, std::size_t k, std::size_t n,
                     std::size_t i0, std::size_t j0, std::size_t cols) {
  float acc[Rows][kColBlock] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const float* brow = b + p * n + j0;
    for (std::size_t r = 0; r < Rows; ++r) {
      const float av = a[(i0 + r) * k + p];
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
}

// Full column tiles avoid the bounds predicate in the inner loop.
template <std::size_t Rows>
inline void micro_nn_full(const float* a, const float* b, float* c, std::size_t k,
                          std::size_t n, std::size_t i0, std::size_t j0) {
  float acc[Rows][kColBlock] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const float* brow = b + p * n + j0;
    for (std::size_t r = 0; r < Rows; ++r) {
      const float av = a[(i0 + r) * k + p];
#pragma omp simd
      for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    std::copy_n(acc[r], kColBlock, c + (i0 + r) * n + j0);
}

template <std::size_t Rows>
inline void row_block(const float* a, const float* b, float* c, std::size_t k, std::size_t n,
                      std::size_t i0) {
  std::size_t j0 = 0;
  for (; j0 + kColBlock <= n; j0 += kColBlock) micro_nn_full<Rows>(a, b, c, k, n, i0, j0);
  if (j0 < n) micro_nn<Rows>(a, b, c, k, n, i0, j0, n - j0);
}

}  // namespace

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n) {
  assert(a.size() >= m * k && b.size() >= k * n && c.size() >= m * n);
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  const auto blocks = static_cast<std::ptrdiff_t>(m / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > (1u << 16))
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk)
    row_block<kRowBlock>(pa, pb, pc, k, n, static_cast<std::size_t>(blk) * kRowBlock);
  for (std::size_t i = static_cast<std::size_t>(blocks) * kRowBlock; i < m; ++i)
    row_block<1>(pa, pb, pc, k, n, i);
}

void transpose(std::span<const float> in, std::span<float> out, std::size_t rows,
               std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile)
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t i1 = std::min(rows, i0 + kTile);
      const std::size_t j1 = std::min(cols, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
    }
}

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n) {
  std::vector<float> bt(k * n);
  transpose(b.first(n * k), bt, n, k);
  gemm_nn(a, bt, c, m, k, n);
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n) {
  std::vector<float> at(m * k);
  transpose(a.first(k * m), at, k, m);
  gemm_nn(at, b, c, m, k, n);
}

void int8_gemm_nt(std::span<const std::int8_t> x, std::span<const std::int8_t> w,
                  std::span<std::int32_t> c, std::size_t m, std::size_t k, std::size_t n) {
  assert(x.size() >= m * k && w.size() >= n * k && c.size() >= m * n);
  // When every partial sum stays below 2^24 in magnitude, float arithmetic on
  // these integers is exact in any order, so the faster float kernel gives the
  // same int32 result.
  int wmax = 0;
  for (std::size_t i = 0; i < n * k; ++i) wmax = std::max(wmax, std::abs(static_cast<int>(w[i])));
  if (static_cast<double>(k) * 128.0 * wmax < 16777216.0) {
    std::vector<float> xf(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(m * k));
    std::vector<float> wf(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(n * k));
    std::vector<float> cf(m * n);
    gemm_nt(xf, wf, cf, m, k, n);
    for (std::size_t i = 0; i < m * n; ++i) c[i] = static_cast<std::int32_t>(cf[i]);
    return;
  }
  // W^T widened to int32 so the inner loop is a contiguous multiply-add over
  // output columns, mirroring the float kernel.
  std::vector<std::int32_t> wt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) wt[p * n + j] = w[j * k + p];
  const std::int8_t* px = x.data();
  const std::int32_t* pw = wt.data();
  std::int32_t* pc = c.data();
  const auto blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * k * n > (1u << 16))
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t cols = std::min(kColBlock, n - j0);
      std::int32_t acc[kRowBlock][kColBlock] = {};
      if (rows == kRowBlock && cols == kColBlock) {
        for (std::size_t p = 0; p < k; ++p) {
          const std::int32_t* wrow = pw + p * n + j0;
          for (std::size_t r = 0; r < kRowBlock; ++r) {
            const std::int32_t xv = px[(i0 + r) * k + p];
#pragma omp simd
            for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] += xv * wrow[j];
          }
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const std::int32_t* wrow = pw + p * n + j0;
          for (std::size_t r = 0; r < rows; ++r) {
            const std::int32_t xv = px[(i0 + r) * k + p];
            for (std::size_t j = 0; j < cols; ++j) acc[r][j] += xv * wrow[j];
          }
        }
      }
      for (std::size_t r = 0; r < rows; ++r) std::copy_n(acc[r], cols, pc + (i0 + r) * n + j0);
    }
  }
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

namespace serial {

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p)
        acc += static_cast<double>(a[i * k + p]) * static_cast<double>(b[p * n + j]);
      c[i * n + j] = static_cast<float>(acc);
    }
}

void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p)
        acc += static_cast<double>(a[i * k + p]) * static_cast<double>(b[j * k + p]);
      c[i * n + j] = static_cast<float>(acc);
    }
}

void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p)
        acc += static_cast<double>(a[p * m + i]) * static_cast<double>(b[p * n + j]);
      c[i * n + j] = static_cast<float>(acc);
    }
}

void int8_gemm_nt(std::span<const std::int8_t> x, std::span<const std::int8_t> w,
                  std::span<std::int32_t> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::int32_t acc = 0;
      for (std::size_t p = 0; p < k; ++p)
        acc += static_cast<std::int32_t>(x[i * k + p]) * static_cast<std::int32_t>(w[j * k + p]);
      c[i * n + j] = acc;
    }
}

}  // namespace serial

}  // namespace sbn::kernels
