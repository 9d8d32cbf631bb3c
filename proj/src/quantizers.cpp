#include "sbn/quantizers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "sbn/error.hpp"

namespace sbn {

namespace {

// Round half away from zero for |v| < 2^23. a - trunc(a) is exact there, so
// the comparison with 0.5 decides the rounding without any error.
inline float round_half_away(float v) {
  const float a = std::fabs(v);
  const float t = static_cast<float>(static_cast<std::int32_t>(a));
  const float r = t + ((a - t) >= 0.5f ? 1.0f : 0.0f);
  return v < 0.0f ? -r : r;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace

float absmean_scale(std::span<const float> w) {
  if (w.empty()) throw ShapeError("absmean_scale: empty tensor");
  // Eight interleaved double partial sums, combined in a fixed order.
  constexpr std::size_t kLanes = 8;
  double part[kLanes] = {};
  const std::size_t full = w.size() / kLanes * kLanes;
  for (std::size_t i = 0; i < full; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) part[l] += std::fabs(static_cast<double>(w[i + l]));
  double acc = 0.0;
  for (double p : part) acc += p;
  for (std::size_t i = full; i < w.size(); ++i) acc += std::fabs(static_cast<double>(w[i]));
  return static_cast<float>(acc / static_cast<double>(w.size()));
}

TernaryWeights ternary_quantize(std::span<const float> w, std::size_t rows, std::size_t cols,
                                float eps) {
  if (w.size() != rows * cols) throw ShapeError("ternary_quantize: size mismatch");
  TernaryWeights out;
  out.rows = rows;
  out.cols = cols;
  out.values.resize(w.size());
  out.gamma = w.empty() ? 0.0f : absmean_scale(w);
  const float denom = out.gamma + eps;
  // After clipping to [-1, 1], rounding half away from zero reduces to a
  // threshold at |w / denom| = 0.5.
  for (std::size_t i = 0; i < w.size(); ++i) {
    const float r = w[i] / denom;
    out.values[i] = static_cast<std::int8_t>((r >= 0.5f) - (r <= -0.5f));
  }
  return out;
}

TernaryWeights ternary_quantize(const Tensor& w, float eps) {
  require_matrix(w, "ternary_quantize");
  return ternary_quantize(w.values(), w.rows(), w.cols(), eps);
}

QuantizedActivations activation_quantize(std::span<const float> x, std::size_t rows,
                                         std::size_t cols, float eps) {
  if (x.size() != rows * cols) throw ShapeError("activation_quantize: size mismatch");
  QuantizedActivations q;
  q.rows = rows;
  q.cols = cols;
  q.values.resize(x.size());
  q.scale.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * cols;
    // For non-negative floats the bit patterns order like the values.
    std::uint32_t mx_bits = 0;
    for (std::size_t j = 0; j < cols; ++j)
      mx_bits = std::max(mx_bits, std::bit_cast<std::uint32_t>(xr[j]) & 0x7fffffffu);
    const float mx = std::bit_cast<float>(mx_bits);
    const float s = 127.0f / (mx + eps);
    q.scale[r] = s;
    std::int8_t* out = q.values.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      // |x * s| <= 127 * max / (max + eps) < 128, so the int conversion is safe.
      float v = round_half_away(xr[j] * s);
      v = v < -128.0f ? -128.0f : (v > 127.0f ? 127.0f : v);
      out[j] = static_cast<std::int8_t>(v);
    }
  }
  return q;
}

QuantizedActivations activation_quantize(const Tensor& x, float eps) {
  require_matrix(x, "activation_quantize");
  return activation_quantize(x.values(), x.rows(), x.cols(), eps);
}

Tensor dequantize(const TernaryWeights& w) {
  std::vector<float> out(w.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w.gamma * static_cast<float>(w.values[i]);
  return Tensor::from({w.rows, w.cols}, std::move(out));
}

Tensor dequantize(const QuantizedActivations& q) {
  std::vector<float> out(q.values.size());
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t j = 0; j < q.cols; ++j)
      out[r * q.cols + j] = static_cast<float>(q.values[r * q.cols + j]) / q.scale[r];
  return Tensor::from({q.rows, q.cols}, std::move(out));
}

double zero_fraction(const TernaryWeights& w) {
  if (w.values.empty()) return 0.0;
  const auto zeros = std::count(w.values.begin(), w.values.end(), std::int8_t{0});
  return static_cast<double>(zeros) / static_cast<double>(w.values.size());
}

Tensor ternary_quantize_ste(const Tensor& w, SteMode mode, float eps) {
  require_matrix(w, "ternary_quantize_ste");
  auto tq = ternary_quantize(w, eps);
  auto deq = dequantize(tq);
  std::vector<float> out(deq.values().begin(), deq.values().end());
  const float denom = tq.gamma + eps;
  std::vector<float> master(w.values().begin(), w.values().end());
  return custom_grad("ternary_quantize", {w}, w.shape(), std::move(out),
                     [mode, denom, master = std::move(master)](std::span<const float> g) {
                       std::vector<float> gw(g.begin(), g.end());
                       if (mode == SteMode::Clipped)
                         for (std::size_t i = 0; i < gw.size(); ++i)
                           if (std::fabs(master[i] / denom) > 1.0f) gw[i] = 0.0f;
                       return std::vector<std::vector<float>>{std::move(gw)};
                     });
}

Tensor activation_quantize_ste(const Tensor& x, float eps) {
  require_matrix(x, "activation_quantize_ste");
  auto deq = dequantize(activation_quantize(x, eps));
  std::vector<float> out(deq.values().begin(), deq.values().end());
  return custom_grad("activation_quantize", {x}, x.shape(), std::move(out),
                     [](std::span<const float> g) {
                       return std::vector<std::vector<float>>{{g.begin(), g.end()}};
                     });
}

}  // namespace sbn
