#pragma once

// Dense compute kernels used by the autodiff engine and the BitLinear layer.
//
// Every kernel has an OpenMP implementation in sbn::kernels and a naive
// serial counterpart in sbn::kernels::serial that the tests use as the
// reference. Parallel kernels partition over output rows only, and each output
// element is reduced in a fixed order, so results do not depend on the number
// of threads.

#include <cstddef>
#include <cstdint>
#include <span>

namespace sbn::kernels {

// C[m x n] = A[m x k] * B[k x n]
void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n);

// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n);

// C[m x n] = A[k x m]^T * B[k x n]
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n);

// out[cols x rows] = in[rows x cols]^T
void transpose(std::span<const float> in, std::span<float> out, std::size_t rows,
               std::size_t cols);

// C[m x n] = X[m x k] * W[n x k]^T with int32 accumulation. Used for the
// int8-activation x ternary-weight product.
void int8_gemm_nt(std::span<const std::int8_t> x, std::span<const std::int8_t> w,
                  std::span<std::int32_t> c, std::size_t m, std::size_t k, std::size_t n);

// Current OpenMP thread budget (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

namespace serial {

void gemm_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n);
void gemm_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
             std::size_t m, std::size_t k, std::size_t n);
void int8_gemm_nt(std::span<const std::int8_t> x, std::span<const std::int8_t> w,
                  std::span<std::int32_t> c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace serial

// Scoped override of the OpenMP thread count.
class ThreadScope {
 public:
  explicit ThreadScope(int n) : saved_(max_threads()) { set_threads(n); }
  ~ThreadScope() { set_threads(saved_); }
  ThreadScope(const ThreadScope&) = delete;
  ThreadScope& operator=(const ThreadScope&) = delete;

 private:
  int saved_;
};

}  // namespace sbn::kernels
