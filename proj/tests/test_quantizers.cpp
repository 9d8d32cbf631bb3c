#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "sbn/error.hpp"
#include "sbn/quantizers.hpp"
#include "sbn/rng.hpp"

using namespace sbn;

namespace {

const std::vector<float> kExample{0.6f, -0.6f, 0.2f, -0.2f, 0.9f, 0.05f, -0.45f, 0.0f};

std::vector<std::int8_t> i8(std::initializer_list<int> v) {
  std::vector<std::int8_t> out;
  for (int x : v) out.push_back(static_cast<std::int8_t>(x));
  return out;
}

}  // namespace

TEST_CASE("absmean scale examples") {
  CHECK(absmean_scale(std::vector<float>{1, -1, 1, -1}) == 1.0f);
  CHECK(absmean_scale(kExample) == doctest::Approx(0.375).epsilon(1e-7));
  CHECK(absmean_scale(std::vector<float>(6, 0.0f)) == 0.0f);
  CHECK_THROWS_AS(absmean_scale(std::vector<float>{}), ShapeError);
}

TEST_CASE("ternary quantize examples") {
  const auto q = ternary_quantize(kExample, 2, 4);
  CHECK(q.values == i8({1, -1, 1, -1, 1, 0, -1, 0}));
  CHECK(q.gamma == doctest::Approx(0.375));

  const auto c = ternary_quantize(std::vector<float>(6, 0.3f), 2, 3);
  for (auto v : c.values) CHECK(v == 1);

  const auto z = ternary_quantize(std::vector<float>(6, 0.0f), 2, 3);
  for (auto v : z.values) CHECK(v == 0);
  CHECK(z.gamma == 0.0f);
}

TEST_CASE("activation quantize examples") {
  // With eps = 0 the row is quantized exactly as written out by hand.
  const auto exact = activation_quantize(std::vector<float>{2.0f, -1.0f, 0.5f, 0.0f}, 1, 4, 0.0f);
  CHECK(exact.values == i8({127, -64, 32, 0}));
  CHECK(exact.scale[0] == 63.5f);

  // The default eps moves -1 * 127 / (2 + eps) just inside -63.5.
  const auto dflt = activation_quantize(std::vector<float>{2.0f, -1.0f, 0.5f, 0.0f}, 1, 4);
  CHECK(dflt.values == i8({127, -63, 32, 0}));
  CHECK(dflt.scale[0] == doctest::Approx(63.5).epsilon(1e-5));

  const auto zeros = activation_quantize(std::vector<float>(5, 0.0f), 1, 5);
  for (auto v : zeros.values) CHECK(v == 0);
  CHECK(std::isfinite(zeros.scale[0]));

  CHECK(activation_quantize(std::vector<float>{-3.0f}, 1, 1).values == i8({-127}));
}

TEST_CASE("activation scales are per row") {
  const auto q = activation_quantize(std::vector<float>{1, -0.5f, 4, 2}, 2, 2, 0.0f);
  CHECK(q.values == i8({127, -64, 127, 64}));
  CHECK(q.scale == std::vector<float>{127.0f, 31.75f});
}

TEST_CASE("dequantize examples") {
  TernaryWeights w{1, 3, i8({1, 0, -1}), 0.375f};
  const auto d = dequantize(w);
  CHECK(std::vector<float>(d.values().begin(), d.values().end()) == std::vector<float>{0.375f, 0, -0.375f});

  // A master that is already gamma * ternary (gamma = mean|w|) round-trips.
  const std::vector<float> master{0.5f, -0.5f, -0.5f, 0.5f};
  const auto q = ternary_quantize(master, 2, 2);
  const auto back = dequantize(q);
  const auto q2 = ternary_quantize(back);
  CHECK(q2.values == q.values);
  CHECK(std::vector<float>(back.values().begin(), back.values().end()) == master);

  const auto za = dequantize(activation_quantize(std::vector<float>(4, 0.0f), 2, 2));
  for (float v : za.values()) CHECK(v == 0.0f);
}

TEST_CASE("zero fraction examples") {
  CHECK(zero_fraction(TernaryWeights{2, 2, i8({1, 0, 0, -1}), 1.0f}) == 0.5);
  CHECK(zero_fraction(TernaryWeights{1, 3, i8({0, 0, 0}), 0.0f}) == 1.0);
}

TEST_CASE("ternary properties on fuzzed matrices") {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = test::random_matrix(rng);
    const auto q = ternary_quantize(m.values, m.rows, m.cols);
    const auto r = test::check_ternary(m, q);
    INFO("trial ", trial, ": ", r.detail);
    REQUIRE(r.ok);
  }
}

TEST_CASE("ternary scale equivariance") {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const auto m = test::random_matrix(rng);
    const auto r = test::check_scale_equivariance(m, rng);
    INFO("trial ", trial, ": ", r.detail);
    REQUIRE(r.ok);
  }
}

TEST_CASE("activation quantizer range and row maxima") {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = test::random_matrix(rng);
    const auto q = activation_quantize(m.values, m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
      int mx = 0;
      float amax = 0.0f;
      for (std::size_t j = 0; j < m.cols; ++j) {
        mx = std::max(mx, std::abs(int(q.values[i * m.cols + j])));
        amax = std::max(amax, std::fabs(m.values[i * m.cols + j]));
      }
      CHECK(q.scale[i] > 0.0f);
      // 127 exactly for eps = 0; eps only pulls the extreme entry below it
      // when max|x| is within a few hundred eps.
      const auto exact = activation_quantize(std::span<const float>(m.values).subspan(i * m.cols, m.cols), 1, m.cols, 0.0f);
      int mx0 = 0;
      for (auto v : exact.values) mx0 = std::max(mx0, std::abs(int(v)));
      if (amax > 0.0f) CHECK(mx0 == 127);
      CHECK(mx == static_cast<int>(std::round(127.0 * amax / (double(amax) + kQuantEps))));
    }
  }
}

TEST_CASE("straight-through estimators pass gradients bit-identically") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = test::random_matrix(rng);
    auto w = Tensor::from({m.rows, m.cols}, m.values, true);
    auto x = Tensor::from({m.rows, m.cols}, m.values, true);
    std::vector<float> up(m.values.size());
    for (auto& g : up) g = static_cast<float>(rng.normal());
    ternary_quantize_ste(w).backward(up);
    activation_quantize_ste(x).backward(up);
    CHECK(std::vector<float>(w.grad().begin(), w.grad().end()) == up);
    CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == up);
  }
}

TEST_CASE("clipped STE gates gradients outside the clipping range") {
  const std::vector<float> v{0.1f, -0.2f, 3.0f, -0.1f};  // gamma = 0.85; only 3.0 exceeds it
  auto w = Tensor::from({1, 4}, v, true);
  const auto y = ternary_quantize_ste(w, SteMode::Clipped);
  const std::vector<float> up{1, 2, 3, 4};
  y.backward(up);
  CHECK(std::vector<float>(w.grad().begin(), w.grad().end()) == std::vector<float>{1, 2, 0, 4});
  const auto q = ternary_quantize(v, 1, 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.values()[i] == q.gamma * q.values[i]);
}
