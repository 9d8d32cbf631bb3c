#pragma once

// N:M semi-structured masks. Groups are M consecutive entries along the input
// (column) dimension of a row-major [d_out, d_in] matrix; a valid mask keeps
// exactly N entries per group.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbn/tensor.hpp"

namespace sbn {

struct NMPattern {
  int n_keep = 8;
  int group_size = 8;

  bool dense() const { return n_keep == group_size; }
  double density() const { return static_cast<double>(n_keep) / group_size; }
  std::string str() const;
  // Parses "N:M". Throws PatternError.
  static NMPattern parse(const std::string& text);
  // Throws PatternError unless 1 <= N <= M.
  void validate() const;
  // Throws PatternError unless validate() passes and cols % M == 0.
  void check_cols(std::size_t cols) const;

  bool operator==(const NMPattern&) const = default;
};

struct NMMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;  // 0/1, row-major
  NMPattern pattern;

  static NMMask ones(std::size_t rows, std::size_t cols, NMPattern pattern);
  bool operator==(const NMMask&) const = default;
};

// Keeps, per group, the N entries of largest |w|; equal magnitudes resolve to
// the lower index. Rows are processed in parallel.
NMMask generate_mask(std::span<const float> w, std::size_t rows, std::size_t cols,
                     NMPattern pattern);
NMMask generate_mask(const Tensor& w, NMPattern pattern);

// Same selection over already-quantized weights (magnitudes in {0, 1}).
NMMask generate_mask(std::span<const std::int8_t> w, std::size_t rows, std::size_t cols,
                     NMPattern pattern);

bool validate_mask(const NMMask& mask);

// Fraction of differing bits. Throws ShapeError/PatternError on mismatch.
double flip_rate(const NMMask& current, const NMMask& previous);

// Upper bound on flip_rate between two masks of the same pattern.
double max_flip_rate(NMPattern pattern);

// Per group, the (N+1)-th largest |w|: the largest magnitude that gets pruned.
// Groups are ordered row-major. Throws PatternError when N == M.
std::vector<float> block_thresholds(std::span<const float> w, std::size_t rows, std::size_t cols,
                                    NMPattern pattern);
std::vector<float> block_thresholds(const Tensor& w, NMPattern pattern);

}  // namespace sbn
