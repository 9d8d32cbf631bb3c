#pragma once

// Random packed-weight cases shared by the unit tests and the acceptance
// binary.

#include <string>
#include <vector>

#include "oracles.hpp"
#include "sbn/packed_kernel.hpp"
#include "sbn/rng.hpp"

namespace sbn::test {

inline std::vector<NMPattern> kernel_patterns() {
  return {{2, 4}, {2, 8}, {3, 8}, {4, 8}, {5, 8}, {6, 8}, {7, 8}};
}

// Ternary values drawn independently, then zeroed outside a random valid mask.
inline EffectiveWeights random_effective(Rng& rng, std::size_t rows, std::size_t cols, NMPattern p) {
  EffectiveWeights e;
  std::vector<float> scores(rows * cols);
  for (auto& s : scores) s = static_cast<float>(rng.uniform());
  e.mask = generate_mask(scores, rows, cols, p);
  e.weights.rows = rows;
  e.weights.cols = cols;
  e.weights.gamma = static_cast<float>(0.01 + rng.uniform());
  e.weights.values.resize(rows * cols);
  for (std::size_t i = 0; i < e.weights.values.size(); ++i)
    e.weights.values[i] = e.mask.bits[i] ? static_cast<std::int8_t>(static_cast<int>(rng.below(3)) - 1) : 0;
  return e;
}

inline QuantizedActivations random_activations(Rng& rng, std::size_t rows, std::size_t cols) {
  QuantizedActivations x;
  x.rows = rows;
  x.cols = cols;
  x.values.resize(rows * cols);
  for (auto& v : x.values) v = static_cast<std::int8_t>(static_cast<int>(rng.below(256)) - 128);
  x.scale.assign(rows, 1.0f);
  return x;
}

// Naive product over the unpacked matrix, written independently of the
// library's dense_reference.
inline std::vector<std::int32_t> oracle_product(const TernaryWeights& w, const QuantizedActivations& x) {
  std::vector<std::int32_t> out(x.rows * w.rows, 0);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t o = 0; o < w.rows; ++o) {
      std::int64_t acc = 0;
      for (std::size_t j = 0; j < w.cols; ++j) acc += std::int64_t(w.values[o * w.cols + j]) * x.values[t * x.cols + j];
      out[t * w.rows + o] = static_cast<std::int32_t>(acc);
    }
  return out;
}

// One fuzz case: random shape, exact round-trip, spmm == dense_reference ==
// independent oracle.
inline Verdict check_packed_case(Rng& rng, NMPattern p) {
  Verdict v;
  const std::size_t rows = 1 + rng.below(24);
  const std::size_t cols = static_cast<std::size_t>(p.group_size) * (1 + rng.below(24));
  const std::size_t tokens = 1 + rng.below(40);
  const auto e = random_effective(rng, rows, cols, p);
  const auto pk = pack(e);
  const auto u = unpack(pk);
  if (!(u.weights == e.weights) || !(u.mask == e.mask)) v.fail("unpack(pack(W)) != W");
  const auto x = random_activations(rng, tokens, cols);
  const auto ref = dense_reference(e.weights, x);
  if (ref != oracle_product(e.weights, x)) v.fail("dense_reference disagrees with the naive oracle");
  if (spmm_accumulate(pk, x) != ref) v.fail("spmm differs from dense_reference");
  if (dense_accumulate(e.weights, x) != ref) v.fail("dense_accumulate differs from dense_reference");
  if (!v.ok) v.detail += " (" + std::to_string(tokens) + "x" + std::to_string(cols) + "x" + std::to_string(rows) + ")";
  return v;
}

}  // namespace sbn::test
