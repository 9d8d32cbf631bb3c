#pragma once

// Inference storage for N:M ternary weights and the integer kernels that run
// on it.
//
// Layout per group of M input columns (groups are row-major over
// [d_out, d_in / M]):
//   value_bits  N codes of 2 bits: 00 -> 0, 01 -> +1, 10 -> -1 (11 invalid)
//   index_meta  N positions in [0, M), ceil(log2 M) bits each, strictly ascending
// Both streams are packed LSB-first into bytes, groups back to back with no
// padding; only the final byte of each stream is padded with zero bits.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sbn/nm_sparsity.hpp"
#include "sbn/quantizers.hpp"
#include "sbn/sparse_bitlinear.hpp"

namespace sbn {

struct PackedNMWeights {
  std::uint32_t d_out = 0;
  std::uint32_t d_in = 0;
  NMPattern pattern;
  std::vector<std::uint8_t> value_bits;
  std::vector<std::uint8_t> index_meta;
  float gamma = 0.0f;

  std::size_t groups() const;
  static unsigned index_width(int group_size);  // ceil(log2 M)
  std::size_t value_payload_bits() const;        // 2 * N * groups
  std::size_t index_payload_bits() const;        // N * ceil(log2 M) * groups

  bool operator==(const PackedNMWeights&) const = default;
};

// Throws PackError if the weights are not ternary, not zero outside the mask,
// or the mask is not a valid N:M mask.
PackedNMWeights pack(const EffectiveWeights& w_eff);
// Throws PackError on malformed metadata (bad codes, out-of-range or
// non-ascending indices, truncated payloads).
EffectiveWeights unpack(const PackedNMWeights& p);

// Integer stage of the sparse product: [t, d_out] int32 accumulators, visiting
// only kept positions. Parallel over output rows.
std::vector<std::int32_t> spmm_accumulate(const PackedNMWeights& p, const QuantizedActivations& x);
// Full sparse product rescaled by gamma / row_scale -> [t, d_out].
Tensor spmm(const PackedNMWeights& p, const QuantizedActivations& x);

// Naive triple-loop int32 product over the zero-filled ternary matrix.
std::vector<std::int32_t> dense_reference(const TernaryWeights& w_eff, const QuantizedActivations& x);
// Dense path with the same loop structure as spmm_accumulate, visiting every
// position. This is the baseline the benchmark compares against.
std::vector<std::int32_t> dense_accumulate(const TernaryWeights& w_eff, const QuantizedActivations& x);

// ---------------------------------------------------------------------------

struct BenchShape {
  std::size_t tokens = 256;
  std::size_t d_in = 1024;
  std::size_t d_out = 1024;
  std::string str() const;  // "t x d_in x d_out", e.g. 256x1024x1024
  static BenchShape parse(const std::string& text);
};

struct BenchReport {
  BenchShape shape;
  NMPattern pattern;
  double dense_ns = 0.0;   // median
  double sparse_ns = 0.0;  // median
  double speedup = 0.0;    // dense_ns / sparse_ns
  std::uint64_t checksum = 0;
  int threads = 1;
};

// Times dense_accumulate against spmm_accumulate on identical random data.
// Verifies both against dense_reference first (throws StateError on any
// mismatch). repeats >= 5 (ConfigError otherwise); 2 warmup runs each.
BenchReport bench(const BenchShape& shape, NMPattern pattern, int repeats,
                  std::uint64_t seed = 1, int threads = 1);

std::string bench_csv_header();
std::string bench_csv_row(const BenchReport& r);

// ---------------------------------------------------------------------------
// Packed inference file: "SBNPACK1", version u32, layer count u32, then per
// layer d_out u32, d_in u32, N u16, M u16, gamma f32, value bytes u64,
// index bytes u64; then each layer's value payload followed by its index
// payload, in layer order. All integers little-endian.

inline constexpr std::uint32_t kPackedFormatVersion = 1;

std::vector<std::uint8_t> encode_packed_file(std::span<const PackedNMWeights> layers);
std::vector<PackedNMWeights> decode_packed_file(std::span<const std::uint8_t> bytes);
void write_packed_file(const std::filesystem::path& path, std::span<const PackedNMWeights> layers);
std::vector<PackedNMWeights> read_packed_file(const std::filesystem::path& path);

}  // namespace sbn
