#include "sbn/nm_sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "sbn/error.hpp"

namespace sbn {

std::string NMPattern::str() const {
  return std::to_string(n_keep) + ":" + std::to_string(group_size);
}

NMPattern NMPattern::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw PatternError("pattern '" + text + "' is not N:M");
  NMPattern p;
  try {
    std::size_t used = 0;
    p.n_keep = std::stoi(text.substr(0, colon), &used);
    if (used != colon) throw PatternError("bad N in '" + text + "'");
    const auto rest = text.substr(colon + 1);
    p.group_size = std::stoi(rest, &used);
    if (used != rest.size()) throw PatternError("bad M in '" + text + "'");
  } catch (const std::logic_error&) {
    throw PatternError("pattern '" + text + "' is not N:M");
  }
  p.validate();
  return p;
}

void NMPattern::validate() const {
  if (group_size < 1 || group_size > 256 || n_keep < 1 || n_keep > group_size)
    throw PatternError("invalid N:M pattern " + str() + " (need 1 <= N <= M <= 256)");
}

void NMPattern::check_cols(std::size_t cols) const {
  validate();
  if (cols % static_cast<std::size_t>(group_size) != 0)
    throw PatternError("input dimension " + std::to_string(cols) + " is not divisible by M=" +
                       std::to_string(group_size));
}

NMMask NMMask::ones(std::size_t rows, std::size_t cols, NMPattern pattern) {
  return NMMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1), pattern};
}

namespace {

// Writes the top-N selection of one group into bits. order is scratch of size M.
template <typename Mag>
inline void select_group(const Mag* mag, std::uint8_t* bits, int m, int n, int* order) {
  for (int i = 0; i < m; ++i) order[i] = i;
  // Insertion sort, descending magnitude; stable so lower indices win ties.
  for (int i = 1; i < m; ++i) {
    const int cur = order[i];
    int j = i - 1;
    while (j >= 0 && mag[order[j]] < mag[cur]) {
      order[j + 1] = order[j];
      --j;
    }
    order[j + 1] = cur;
  }
  for (int i = 0; i < m; ++i) bits[i] = 0;
  for (int i = 0; i < n; ++i) bits[order[i]] = 1;
}

// Rank form of the same selection, vectorised across a chunk of groups. An
// entry is kept when fewer than N entries of its group beat it: a larger
// magnitude beats it, and so does an equal one at a lower index.
template <int M, typename T, typename AbsFn>
void select_chunk(const T* w, std::uint8_t* bits, int count, int n, AbsFn absfn) {
  constexpr int C = 64;
  float mag[M][C];
  int rank[M][C];
  for (int g = 0; g < count; ++g)
    for (int i = 0; i < M; ++i) mag[i][g] = absfn(w[g * M + i]);
  for (int g = count; g < C; ++g)
    for (int i = 0; i < M; ++i) mag[i][g] = 0.0f;
  for (int i = 0; i < M; ++i) {
    for (int g = 0; g < C; ++g) rank[i][g] = 0;
    for (int j = 0; j < M; ++j) {
      if (j < i)
        for (int g = 0; g < C; ++g) rank[i][g] += mag[j][g] >= mag[i][g];
      else if (j > i)
        for (int g = 0; g < C; ++g) rank[i][g] += mag[j][g] > mag[i][g];
    }
  }
  for (int g = 0; g < count; ++g)
    for (int i = 0; i < M; ++i) bits[g * M + i] = static_cast<std::uint8_t>(rank[i][g] < n);
}

template <int M, typename T, typename AbsFn>
void select_all(const T* w, std::uint8_t* bits, std::size_t groups, int n, AbsFn absfn) {
  constexpr std::size_t C = 64;
  const auto chunks = static_cast<std::ptrdiff_t>((groups + C - 1) / C);
#pragma omp parallel for schedule(static) if (groups * M > (1u << 15))
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t g0 = static_cast<std::size_t>(c) * C;
    const int count = static_cast<int>(std::min(C, groups - g0));
    select_chunk<M>(w + g0 * M, bits + g0 * M, count, n, absfn);
  }
}

template <typename T, typename AbsFn>
NMMask generate_impl(std::span<const T> w, std::size_t rows, std::size_t cols, NMPattern pattern,
                     AbsFn absfn) {
  if (w.size() != rows * cols) throw ShapeError("generate_mask: size mismatch");
  pattern.check_cols(cols);
  NMMask mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 0), pattern};
  const int m = pattern.group_size;
  const int n = pattern.n_keep;
  // Groups never straddle rows, so the flat array is a sequence of groups.
  const std::size_t groups = rows * cols / static_cast<std::size_t>(m);
  switch (m) {
    case 2: select_all<2>(w.data(), mask.bits.data(), groups, n, absfn); return mask;
    case 4: select_all<4>(w.data(), mask.bits.data(), groups, n, absfn); return mask;
    case 8: select_all<8>(w.data(), mask.bits.data(), groups, n, absfn); return mask;
    case 16: select_all<16>(w.data(), mask.bits.data(), groups, n, absfn); return mask;
    default: break;
  }
  const auto ngroups = static_cast<std::ptrdiff_t>(groups);
#pragma omp parallel for schedule(static) if (rows * cols > (1u << 15))
  for (std::ptrdiff_t g = 0; g < ngroups; ++g) {
    float mag[256];
    int order[256];
    const std::size_t base = static_cast<std::size_t>(g) * static_cast<std::size_t>(m);
    for (int i = 0; i < m; ++i) mag[i] = absfn(w[base + static_cast<std::size_t>(i)]);
    select_group(mag, mask.bits.data() + base, m, n, order);
  }
  return mask;
}

}  // namespace

NMMask generate_mask(std::span<const float> w, std::size_t rows, std::size_t cols,
                     NMPattern pattern) {
  return generate_impl(w, rows, cols, pattern, [](float v) { return std::fabs(v); });
}

NMMask generate_mask(const Tensor& w, NMPattern pattern) {
  if (w.shape().size() != 2) throw ShapeError("generate_mask: expected a 2-D tensor");
  return generate_mask(w.values(), w.rows(), w.cols(), pattern);
}

NMMask generate_mask(std::span<const std::int8_t> w, std::size_t rows, std::size_t cols,
                     NMPattern pattern) {
  return generate_impl(w, rows, cols, pattern,
                       [](std::int8_t v) { return static_cast<float>(v < 0 ? -v : v); });
}

bool validate_mask(const NMMask& mask) {
  const int m = mask.pattern.group_size;
  if (m < 1 || mask.pattern.n_keep < 1 || mask.pattern.n_keep > m) return false;
  if (mask.cols % static_cast<std::size_t>(m) != 0) return false;
  if (mask.bits.size() != mask.rows * mask.cols) return false;
  for (std::size_t base = 0; base < mask.bits.size(); base += static_cast<std::size_t>(m)) {
    int count = 0;
    for (int i = 0; i < m; ++i) {
      const auto b = mask.bits[base + static_cast<std::size_t>(i)];
      if (b > 1) return false;
      count += b;
    }
    if (count != mask.pattern.n_keep) return false;
  }
  return true;
}

double flip_rate(const NMMask& current, const NMMask& previous) {
  if (current.rows != previous.rows || current.cols != previous.cols ||
      current.bits.size() != previous.bits.size())
    throw ShapeError("flip_rate: mask shapes differ");
  if (!(current.pattern == previous.pattern))
    throw PatternError("flip_rate: patterns differ (" + current.pattern.str() + " vs " +
                       previous.pattern.str() + ")");
  if (current.bits.empty()) return 0.0;
  std::size_t diff = 0;
  for (std::size_t i = 0; i < current.bits.size(); ++i) diff += current.bits[i] != previous.bits[i];
  return static_cast<double>(diff) / static_cast<double>(current.bits.size());
}

double max_flip_rate(NMPattern pattern) {
  const int n = pattern.n_keep;
  const int m = pattern.group_size;
  return 2.0 * std::min(n, m - n) / static_cast<double>(m);
}

std::vector<float> block_thresholds(std::span<const float> w, std::size_t rows, std::size_t cols,
                                    NMPattern pattern) {
  if (w.size() != rows * cols) throw ShapeError("block_thresholds: size mismatch");
  pattern.check_cols(cols);
  if (pattern.dense())
    throw PatternError("block_thresholds: undefined for dense pattern " + pattern.str());
  const auto m = static_cast<std::size_t>(pattern.group_size);
  const auto n = static_cast<std::size_t>(pattern.n_keep);
  std::vector<float> out(w.size() / m);
  const auto ngroups = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (w.size() > (1u << 15))
  for (std::ptrdiff_t g = 0; g < ngroups; ++g) {
    float mag[256];
    const std::size_t base = static_cast<std::size_t>(g) * m;
    for (std::size_t i = 0; i < m; ++i) mag[i] = std::fabs(w[base + i]);
    std::nth_element(mag, mag + n, mag + m, std::greater<>());
    out[static_cast<std::size_t>(g)] = mag[n];
  }
  return out;
}

std::vector<float> block_thresholds(const Tensor& w, NMPattern pattern) {
  if (w.shape().size() != 2) throw ShapeError("block_thresholds: expected a 2-D tensor");
  return block_thresholds(w.values(), w.rows(), w.cols(), pattern);
}

}  // namespace sbn
