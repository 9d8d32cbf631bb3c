#pragma once

// Ternary absmean weight quantizer and per-token int8 absmax activation
// quantizer, plus straight-through autodiff wrappers for both.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sbn/tensor.hpp"

namespace sbn {

inline constexpr float kQuantEps = 1e-5f;

struct TernaryWeights {
  std::size_t rows = 0;  // d_out
  std::size_t cols = 0;  // d_in
  std::vector<std::int8_t> values;  // {-1, 0, +1}, row-major
  float gamma = 0.0f;

  bool operator==(const TernaryWeights&) const = default;
};

struct QuantizedActivations {
  std::size_t rows = 0;  // tokens
  std::size_t cols = 0;
  std::vector<std::int8_t> values;  // [-128, 127]
  std::vector<float> scale;         // one per row: 127 / (max|x_row| + eps)
};

// Backward behaviour of the weight quantizer. Identity passes gradients
// through unchanged; Clipped zeroes them where |w| / (gamma + eps) > 1.
enum class SteMode { Identity, Clipped };

// Mean absolute value over all entries. Throws ShapeError when empty.
float absmean_scale(std::span<const float> w);

// Round half away from zero, clipped to [-1, 1], of w / (gamma + eps).
TernaryWeights ternary_quantize(std::span<const float> w, std::size_t rows, std::size_t cols,
                                float eps = kQuantEps);
TernaryWeights ternary_quantize(const Tensor& w, float eps = kQuantEps);

QuantizedActivations activation_quantize(std::span<const float> x, std::size_t rows,
                                         std::size_t cols, float eps = kQuantEps);
QuantizedActivations activation_quantize(const Tensor& x, float eps = kQuantEps);

// gamma * values.
Tensor dequantize(const TernaryWeights& w);
// values / scale, per row.
Tensor dequantize(const QuantizedActivations& q);

double zero_fraction(const TernaryWeights& w);

// Autodiff wrappers. Forward returns the dequantized tensor; backward is the
// straight-through estimator.
Tensor ternary_quantize_ste(const Tensor& w, SteMode mode = SteMode::Identity,
                            float eps = kQuantEps);
Tensor activation_quantize_ste(const Tensor& x, float eps = kQuantEps);

}  // namespace sbn
