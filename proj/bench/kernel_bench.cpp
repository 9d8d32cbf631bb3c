// Times the OpenMP kernels against their serial references and checks that
// both produce the same result. Usage: sbn_bench [m k n] [repeats]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <vector>

#include "sbn/kernels.hpp"
#include "sbn/packed_kernel.hpp"
#include "sbn/rng.hpp"

using namespace sbn;

namespace {

template <typename F>
double median_ms(int repeats, F&& f) {
  std::vector<double> t;
  f();
  for (int i = 0; i < repeats; ++i) {
    const auto a = std::chrono::steady_clock::now();
    f();
    const auto b = std::chrono::steady_clock::now();
    t.push_back(std::chrono::duration<double, std::milli>(b - a).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, static_cast<double>(std::abs(a[i] - b[i])));
  return d;
}

void row(const char* name, double serial, double parallel, const char* check) {
  std::printf("%-14s %10.3f %10.3f %8.2fx  %s\n", name, serial, parallel, serial / parallel, check);
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t m = 256, k = 512, n = 512;
  int repeats = 5;
  if (argc >= 4) {
    m = std::strtoul(argv[1], nullptr, 10);
    k = std::strtoul(argv[2], nullptr, 10);
    n = std::strtoul(argv[3], nullptr, 10);
  }
  if (argc >= 5) repeats = std::max(1, std::atoi(argv[4]));

  Rng rng(7);
  std::vector<float> a(m * k), b(k * n), bt(n * k), at(k * m);
  for (auto* v : {&a, &b, &bt, &at})
    for (auto& x : *v) x = static_cast<float>(rng.normal());
  std::vector<std::int8_t> xi(m * k), wi(n * k);
  for (auto& x : xi) x = static_cast<std::int8_t>(static_cast<int>(rng.below(255)) - 127);
  for (auto& x : wi) x = static_cast<std::int8_t>(static_cast<int>(rng.below(3)) - 1);

  std::printf("shape %zux%zux%zu, %d threads, median of %d\n", m, k, n, kernels::max_threads(), repeats);
  std::printf("%-14s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");

  std::vector<float> c1(m * n), c2(m * n);
  const double s_nn = median_ms(repeats, [&] { kernels::serial::gemm_nn(a, b, c1, m, k, n); });
  const double p_nn = median_ms(repeats, [&] { kernels::gemm_nn(a, b, c2, m, k, n); });
  row("gemm_nn", s_nn, p_nn, max_abs_diff(c1, c2) < 1e-3 ? "ok" : "MISMATCH");

  const double s_nt = median_ms(repeats, [&] { kernels::serial::gemm_nt(a, bt, c1, m, k, n); });
  const double p_nt = median_ms(repeats, [&] { kernels::gemm_nt(a, bt, c2, m, k, n); });
  row("gemm_nt", s_nt, p_nt, max_abs_diff(c1, c2) < 1e-3 ? "ok" : "MISMATCH");

  const double s_tn = median_ms(repeats, [&] { kernels::serial::gemm_tn(at, b, c1, m, k, n); });
  const double p_tn = median_ms(repeats, [&] { kernels::gemm_tn(at, b, c2, m, k, n); });
  row("gemm_tn", s_tn, p_tn, max_abs_diff(c1, c2) < 1e-3 ? "ok" : "MISMATCH");

  std::vector<std::int32_t> i1(m * n), i2(m * n);
  const double s_i8 = median_ms(repeats, [&] { kernels::serial::int8_gemm_nt(xi, wi, i1, m, k, n); });
  const double p_i8 = median_ms(repeats, [&] { kernels::int8_gemm_nt(xi, wi, i2, m, k, n); });
  row("int8_gemm_nt", s_i8, p_i8, i1 == i2 ? "ok" : "MISMATCH");

  // Packed 6:8 product: one thread vs all threads.
  const NMPattern pattern{6, 8};
  if (k % 8 == 0) {
    std::vector<float> master(n * k);
    for (auto& x : master) x = static_cast<float>(rng.normal());
    EffectiveWeights eff{ternary_quantize(master, n, k), generate_mask(master, n, k, pattern)};
    for (std::size_t i = 0; i < master.size(); ++i)
      if (!eff.mask.bits[i]) eff.weights.values[i] = 0;
    const auto packed = pack(eff);
    const auto x = activation_quantize(a, m, k);
    std::vector<std::int32_t> o1, o2;
    const double s_sp = median_ms(repeats, [&] {
      kernels::ThreadScope one(1);
      o1 = spmm_accumulate(packed, x);
    });
    const double p_sp = median_ms(repeats, [&] { o2 = spmm_accumulate(packed, x); });
    row("spmm 6:8", s_sp, p_sp, o1 == o2 && o1 == dense_reference(eff.weights, x) ? "ok" : "MISMATCH");
  }
  return 0;
}
