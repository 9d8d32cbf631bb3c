#pragma once

// Branch-free single-precision exp that the compiler can vectorise. Range
// reduction by ln 2 and a degree-6 polynomial (Cephes coefficients); within
// 1 ulp of std::exp over the clamped domain. Inputs are clamped to
// [-87.3, 88.3], so the result is always a finite normal float.

#include <bit>
#include <cmath>
#include <cstdint>

namespace sbn::detail {

inline float fast_exp(float x) {
  x = x < -87.3f ? -87.3f : (x > 88.3f ? 88.3f : x);
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  float r = x - n * 0.693359375f;
  r = r + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return y * std::bit_cast<float>(bits);
}

}  // namespace sbn::detail
