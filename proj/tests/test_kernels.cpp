#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "sbn/kernels.hpp"
#include "sbn/rng.hpp"

using namespace sbn;

namespace {

std::vector<float> random_floats(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

std::vector<std::int8_t> random_int8(Rng& rng, std::size_t n, int lo, int hi) {
  std::vector<std::int8_t> v(n);
  for (auto& x : v) x = static_cast<std::int8_t>(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
  return v;
}

// Float sums over k terms of N(0,1) products: blocked and naive orders agree
// to a few ulps of the absolute row mass.
void check_close(const std::vector<float>& a, const std::vector<float>& b, std::size_t k) {
  REQUIRE(a.size() == b.size());
  const double tol = 1e-5 * std::sqrt(static_cast<double>(k)) + 1e-6;
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= tol * (1.0 + std::fabs(b[i])));
}

struct Dims {
  std::size_t m, k, n;
};

const Dims kDims[] = {{1, 1, 1}, {3, 5, 7}, {17, 33, 9}, {64, 128, 96}, {5, 300, 2}, {40, 8, 130}};

}  // namespace

TEST_CASE("float GEMMs match the serial reference") {
  Rng rng(1);
  for (const auto& d : kDims) {
    INFO("m=", d.m, " k=", d.k, " n=", d.n);
    const auto a = random_floats(rng, d.m * d.k);
    const auto b = random_floats(rng, d.k * d.n);
    const auto bt = random_floats(rng, d.n * d.k);
    const auto at = random_floats(rng, d.k * d.m);
    std::vector<float> c(d.m * d.n), r(d.m * d.n);

    kernels::gemm_nn(a, b, c, d.m, d.k, d.n);
    kernels::serial::gemm_nn(a, b, r, d.m, d.k, d.n);
    check_close(c, r, d.k);

    kernels::gemm_nt(a, bt, c, d.m, d.k, d.n);
    kernels::serial::gemm_nt(a, bt, r, d.m, d.k, d.n);
    check_close(c, r, d.k);

    kernels::gemm_tn(at, b, c, d.m, d.k, d.n);
    kernels::serial::gemm_tn(at, b, r, d.m, d.k, d.n);
    check_close(c, r, d.k);
  }
}

TEST_CASE("serial GEMM agrees with a double-precision hand loop") {
  Rng rng(2);
  const std::size_t m = 6, k = 11, n = 4;
  const auto a = random_floats(rng, m * k);
  const auto b = random_floats(rng, k * n);
  std::vector<float> c(m * n);
  kernels::serial::gemm_nn(a, b, c, m, k, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += double(a[i * k + p]) * b[p * n + j];
      CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-5));
    }
}

TEST_CASE("transpose") {
  Rng rng(3);
  const std::size_t rows = 37, cols = 70;
  const auto in = random_floats(rng, rows * cols);
  std::vector<float> out(rows * cols), back(rows * cols);
  kernels::transpose(in, out, rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) CHECK(out[j * rows + i] == in[i * cols + j]);
  kernels::transpose(out, back, cols, rows);
  CHECK(back == in);
}

TEST_CASE("int8 GEMM is exact on both accumulation paths") {
  Rng rng(4);
  // Ternary weights with small k take the float path; wide int8 weights with
  // k * 128 * 127 >= 2^24 take the integer path.
  struct Case {
    std::size_t m, k, n;
    int wlo, whi;
  };
  for (const auto& c : {Case{7, 64, 9, -1, 1}, Case{33, 512, 17, -1, 1}, Case{5, 1100, 6, -127, 127},
                        Case{3, 2048, 4, -128, 127}, Case{1, 1, 1, -128, 127}}) {
    INFO("k=", c.k);
    const auto x = random_int8(rng, c.m * c.k, -128, 127);
    const auto w = random_int8(rng, c.n * c.k, c.wlo, c.whi);
    std::vector<std::int32_t> out(c.m * c.n), ref(c.m * c.n);
    kernels::int8_gemm_nt(x, w, out, c.m, c.k, c.n);
    kernels::serial::int8_gemm_nt(x, w, ref, c.m, c.k, c.n);
    CHECK(out == ref);
    for (std::size_t i = 0; i < c.m; ++i)
      for (std::size_t j = 0; j < c.n; ++j) {
        std::int64_t s = 0;
        for (std::size_t p = 0; p < c.k; ++p) s += std::int64_t(x[i * c.k + p]) * w[j * c.k + p];
        CHECK(ref[i * c.n + j] == s);
      }
  }
  // Extreme magnitudes on the integer path.
  const std::size_t k = 4096;
  const std::vector<std::int8_t> x(k, -128), w(k, -128);
  std::vector<std::int32_t> out(1);
  kernels::int8_gemm_nt(x, w, out, 1, k, 1);
  CHECK(out[0] == 128 * 128 * 4096);
}

TEST_CASE("kernels do not depend on the thread count") {
  Rng rng(5);
  const std::size_t m = 50, k = 96, n = 70;
  const auto a = random_floats(rng, m * k);
  const auto b = random_floats(rng, k * n);
  const auto bt = random_floats(rng, n * k);
  const auto at = random_floats(rng, k * m);
  const auto x = random_int8(rng, m * k, -128, 127);
  const auto w = random_int8(rng, n * k, -1, 1);
  auto run = [&] {
    std::vector<float> c1(m * n), c2(m * n), c3(m * n);
    std::vector<std::int32_t> c4(m * n);
    kernels::gemm_nn(a, b, c1, m, k, n);
    kernels::gemm_nt(a, bt, c2, m, k, n);
    kernels::gemm_tn(at, b, c3, m, k, n);
    kernels::int8_gemm_nt(x, w, c4, m, k, n);
    return std::make_tuple(c1, c2, c3, c4);
  };
  decltype(run()) one;
  {
    kernels::ThreadScope ts(1);
    CHECK(kernels::max_threads() == 1);
    one = run();
  }
  for (int t : {2, 3, 4}) {
    kernels::ThreadScope ts(t);
    CHECK(run() == one);
  }
}

TEST_CASE("thread scope restores the previous budget") {
  const int before = kernels::max_threads();
  {
    kernels::ThreadScope ts(1);
    CHECK(kernels::max_threads() == 1);
  }
  CHECK(kernels::max_threads() == before);
}
