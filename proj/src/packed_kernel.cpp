#include "sbn/packed_kernel.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <utility>

#include "sbn/binary_io.hpp"
#include "sbn/error.hpp"
#include "sbn/hash.hpp"
#include "sbn/kernels.hpp"

namespace sbn {

namespace {

constexpr char kMagic[8] = {'S', 'B', 'N', 'P', 'A', 'C', 'K', '1'};

class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  void put(std::uint32_t value, unsigned width) {
    for (unsigned b = 0; b < width; ++b, ++pos_) {
      if (pos_ % 8 == 0) out_.push_back(0);
      if ((value >> b) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << (pos_ % 8));
    }
  }

 private:
  std::vector<std::uint8_t>& out_;
  std::size_t pos_ = 0;
};

// Reads fixed-width fields LSB-first. Callers check the payload length first.
inline std::uint32_t read_bits(const std::uint8_t* data, std::size_t bitpos, unsigned width) {
  std::uint32_t v = 0;
  for (unsigned b = 0; b < width; ++b) {
    const std::size_t p = bitpos + b;
    v |= static_cast<std::uint32_t>((data[p >> 3] >> (p & 7)) & 1u) << b;
  }
  return v;
}

// Payload copy with eight trailing zero bytes, so read_field may always load a
// full word.
std::vector<std::uint8_t> padded(const std::vector<std::uint8_t>& bytes) {
  std::vector<std::uint8_t> out(bytes.size() + 8, 0);
  std::copy(bytes.begin(), bytes.end(), out.begin());
  return out;
}

// At least 56 valid bits starting at bitpos, from a padded buffer.
inline std::uint64_t read_word(const std::uint8_t* data, std::size_t bitpos) {
  const std::uint8_t* b = data + (bitpos >> 3);
  std::uint64_t word = 0;
  for (unsigned i = 0; i < 8; ++i) word |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return word >> (bitpos & 7);
}

// Same result as read_bits for width <= 32, reading from a padded buffer.
inline std::uint32_t read_field(const std::uint8_t* data, std::size_t bitpos, unsigned width) {
  return static_cast<std::uint32_t>(read_word(data, bitpos) & ((std::uint64_t{1} << width) - 1u));
}

struct RowLayout {
  std::size_t m = 0, n = 0, groups = 0;
  unsigned iw = 0;
};

// Decodes one output row's kept entries into activation column pointers and
// ternary values. Returns true when any field is out of range. M and N fix the
// pattern at compile time; zero means take it from the layout.
template <std::size_t M, std::size_t N>
bool decode_row(const std::uint8_t* index_meta, const std::uint8_t* value_bits, std::size_t slot0,
                RowLayout l, const std::int16_t* xt, std::size_t t, const std::int16_t** cols,
                std::int32_t* vals) {
  const std::size_t m = M ? M : l.m;
  const std::size_t n = N ? N : l.n;
  const unsigned iw = M ? std::bit_width(M - 1) : l.iw;
  // A group's fields fit in one 56-bit window for the common patterns.
  const bool whole_group = n * iw <= 56 && 2 * n <= 56;
  const std::uint64_t imask = (std::uint64_t{1} << iw) - 1u;
  bool bad = false;
  for (std::size_t g = 0; g < l.groups; ++g) {
    const std::size_t e0 = g * n;
    std::uint64_t iword = 0, vword = 0;
    if (whole_group) {
      iword = read_word(index_meta, (slot0 + e0) * iw);
      vword = read_word(value_bits, (slot0 + e0) * 2);
    }
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t e = e0 + s;
      const auto idx = whole_group ? static_cast<std::uint32_t>((iword >> (s * iw)) & imask)
                                   : read_field(index_meta, (slot0 + e) * iw, iw);
      const auto code = whole_group ? static_cast<std::uint32_t>((vword >> (2 * s)) & 3u)
                                    : read_field(value_bits, (slot0 + e) * 2, 2);
      bad |= (idx >= m) | (code == 3);
      cols[e] = xt + (g * m + std::min<std::size_t>(idx, m - 1)) * t;
      vals[e] = static_cast<std::int32_t>(code & 1u) - static_cast<std::int32_t>(code >> 1);
    }
  }
  return bad;
}

using DecodeFn = bool (*)(const std::uint8_t*, const std::uint8_t*, std::size_t, RowLayout,
                          const std::int16_t*, std::size_t, const std::int16_t**, std::int32_t*);

template <std::size_t M, std::size_t... Ns>
constexpr std::array<DecodeFn, sizeof...(Ns)> decoders(std::index_sequence<Ns...>) {
  return {&decode_row<M, Ns + 1>...};
}

DecodeFn pick_decoder(std::size_t m, std::size_t n) {
  static constexpr auto by4 = decoders<4>(std::make_index_sequence<4>{});
  static constexpr auto by8 = decoders<8>(std::make_index_sequence<8>{});
  if (m == 4) return by4[n - 1];
  if (m == 8) return by8[n - 1];
  return &decode_row<0, 0>;
}

inline std::int32_t decode_value(std::uint32_t code) {
  switch (code) {
    case 0: return 0;
    case 1: return 1;
    case 2: return -1;
    default: throw PackError("invalid ternary code 0b11");
  }
}

std::size_t bytes_for(std::size_t bits) { return (bits + 7) / 8; }

void check_payloads(const PackedNMWeights& p) {
  p.pattern.check_cols(p.d_in);
  if (p.value_bits.size() != bytes_for(p.value_payload_bits()))
    throw PackError("value payload has " + std::to_string(p.value_bits.size()) + " bytes, expected " +
                    std::to_string(bytes_for(p.value_payload_bits())));
  if (p.index_meta.size() != bytes_for(p.index_payload_bits()))
    throw PackError("index payload has " + std::to_string(p.index_meta.size()) + " bytes, expected " +
                    std::to_string(bytes_for(p.index_payload_bits())));
}

// x^T widened to int16: [d_in, t]. Shared by both benchmarked kernels.
std::vector<std::int16_t> transpose_activations(const QuantizedActivations& x) {
  std::vector<std::int16_t> xt(x.rows * x.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t k = 0; k < x.cols; ++k) xt[k * x.rows + i] = x.values[i * x.cols + k];
  return xt;
}

// Tokens are processed in tiles of R 16-lane int32 registers. Both benchmarked
// kernels share this routine and differ only in which columns they visit.
using I32x16 = std::int32_t __attribute__((vector_size(64)));
using I16x16 = std::int16_t __attribute__((vector_size(32)));
constexpr std::size_t kLanes = 16;

template <std::size_t R>
inline void accumulate_tile(std::int32_t* out, std::size_t stride, const std::int16_t* const* cols,
                            const std::int32_t* vals, std::size_t count, std::size_t i0) {
  I32x16 a[R] = {};
  for (std::size_t e = 0; e < count; ++e) {
    const std::int16_t* xc = cols[e] + i0;
    const I16x16 v = I16x16{} + static_cast<std::int16_t>(vals[e]);
    for (std::size_t r = 0; r < R; ++r) {
      I16x16 h;
      std::memcpy(&h, xc + r * kLanes, sizeof h);
      a[r] += __builtin_convertvector(h * v, I32x16);
    }
  }
  std::int32_t acc[R * kLanes];
  std::memcpy(acc, a, sizeof acc);
  for (std::size_t i = 0; i < R * kLanes; ++i) out[(i0 + i) * stride] = acc[i];
}

// out[i * stride] = sum_e vals[e] * cols[e][i] for tokens i < t, where each
// cols[e] points at one transposed activation column. Products fit in int16
// since |vals| <= 1 and |x| <= 128.
__attribute__((noinline)) void accumulate_row(std::int32_t* out, std::size_t stride, const std::int16_t* const* cols,
                           const std::int32_t* vals, std::size_t count, std::size_t t) {
  std::size_t i0 = 0;
  for (; i0 + 8 * kLanes <= t; i0 += 8 * kLanes) accumulate_tile<8>(out, stride, cols, vals, count, i0);
  if (i0 + 4 * kLanes <= t) {
    accumulate_tile<4>(out, stride, cols, vals, count, i0);
    i0 += 4 * kLanes;
  }
  if (i0 + 2 * kLanes <= t) {
    accumulate_tile<2>(out, stride, cols, vals, count, i0);
    i0 += 2 * kLanes;
  }
  if (i0 + kLanes <= t) {
    accumulate_tile<1>(out, stride, cols, vals, count, i0);
    i0 += kLanes;
  }
  if (i0 < t) {
    const std::size_t rest = t - i0;
    std::int32_t acc[kLanes] = {};
    for (std::size_t e = 0; e < count; ++e) {
      const std::int16_t* xc = cols[e] + i0;
      const std::int32_t v = vals[e];
      for (std::size_t i = 0; i < rest; ++i) acc[i] += v * static_cast<std::int32_t>(xc[i]);
    }
    for (std::size_t i = 0; i < rest; ++i) out[(i0 + i) * stride] = acc[i];
  }
}

}  // namespace

std::size_t PackedNMWeights::groups() const {
  return pattern.group_size > 0 ? static_cast<std::size_t>(d_out) * d_in /
                                      static_cast<std::size_t>(pattern.group_size)
                                : 0;
}

unsigned PackedNMWeights::index_width(int group_size) {
  unsigned w = 0;
  while ((1u << w) < static_cast<unsigned>(group_size)) ++w;
  return w;
}

std::size_t PackedNMWeights::value_payload_bits() const {
  return 2u * static_cast<std::size_t>(pattern.n_keep) * groups();
}

std::size_t PackedNMWeights::index_payload_bits() const {
  return static_cast<std::size_t>(pattern.n_keep) * index_width(pattern.group_size) * groups();
}

PackedNMWeights pack(const EffectiveWeights& w_eff) {
  const auto& w = w_eff.weights;
  const auto& mask = w_eff.mask;
  if (w.values.size() != w.rows * w.cols) throw PackError("pack: weight size mismatch");
  if (mask.rows != w.rows || mask.cols != w.cols) throw PackError("pack: mask shape differs");
  if (!validate_mask(mask)) throw PackError("pack: mask is not a valid " + mask.pattern.str() + " mask");
  PackedNMWeights p;
  p.d_out = static_cast<std::uint32_t>(w.rows);
  p.d_in = static_cast<std::uint32_t>(w.cols);
  p.pattern = mask.pattern;
  p.gamma = w.gamma;
  const auto m = static_cast<std::size_t>(mask.pattern.group_size);
  const unsigned iw = PackedNMWeights::index_width(mask.pattern.group_size);
  BitWriter values(p.value_bits), index(p.index_meta);
  for (std::size_t base = 0; base < w.values.size(); base += m) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto v = w.values[base + i];
      if (v < -1 || v > 1) throw PackError("pack: value " + std::to_string(v) + " is not ternary");
      if (!mask.bits[base + i]) {
        if (v != 0) throw PackError("pack: nonzero weight at a masked position");
        continue;
      }
      index.put(static_cast<std::uint32_t>(i), iw);
      values.put(v == 0 ? 0u : (v > 0 ? 1u : 2u), 2);
    }
  }
  return p;
}

EffectiveWeights unpack(const PackedNMWeights& p) {
  try {
    check_payloads(p);
  } catch (const PatternError& e) {
    throw PackError(std::string("unpack: ") + e.what());
  }
  const auto m = static_cast<std::size_t>(p.pattern.group_size);
  const auto n = static_cast<std::size_t>(p.pattern.n_keep);
  const unsigned iw = PackedNMWeights::index_width(p.pattern.group_size);
  EffectiveWeights out;
  out.weights.rows = p.d_out;
  out.weights.cols = p.d_in;
  out.weights.gamma = p.gamma;
  out.weights.values.assign(static_cast<std::size_t>(p.d_out) * p.d_in, 0);
  out.mask = NMMask{p.d_out, p.d_in, std::vector<std::uint8_t>(out.weights.values.size(), 0), p.pattern};
  const std::size_t groups = p.groups();
  for (std::size_t g = 0; g < groups; ++g) {
    long prev = -1;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t slot = g * n + s;
      const auto idx = read_bits(p.index_meta.data(), slot * iw, iw);
      if (idx >= m) throw PackError("unpack: index " + std::to_string(idx) + " outside group");
      if (static_cast<long>(idx) <= prev) throw PackError("unpack: indices not strictly ascending");
      prev = idx;
      const auto v = decode_value(read_bits(p.value_bits.data(), slot * 2, 2));
      out.weights.values[g * m + idx] = static_cast<std::int8_t>(v);
      out.mask.bits[g * m + idx] = 1;
    }
  }
  return out;
}

std::vector<std::int32_t> spmm_accumulate(const PackedNMWeights& p, const QuantizedActivations& x) {
  if (x.cols != p.d_in)
    throw ShapeError("spmm: activations have " + std::to_string(x.cols) + " columns, weights " +
                     std::to_string(p.d_in));
  check_payloads(p);
  const std::size_t t = x.rows;
  const std::size_t d_out = p.d_out;
  const auto m = static_cast<std::size_t>(p.pattern.group_size);
  const auto n = static_cast<std::size_t>(p.pattern.n_keep);
  const unsigned iw = PackedNMWeights::index_width(p.pattern.group_size);
  const std::size_t groups_per_row = p.d_in / m;
  const std::size_t kept_per_row = groups_per_row * n;
  const auto xt = transpose_activations(x);
  const auto index_meta = padded(p.index_meta);
  const auto value_bits = padded(p.value_bits);
  RowLayout layout;
  layout.m = m;
  layout.n = n;
  layout.iw = iw;
  layout.groups = groups_per_row;
  const DecodeFn decode = pick_decoder(m, n);
  std::vector<std::int32_t> out(t * d_out);
  const auto rows = static_cast<std::ptrdiff_t>(d_out);
  bool malformed = false;
#pragma omp parallel
  {
    std::vector<const std::int16_t*> cols(kept_per_row);
    std::vector<std::int32_t> vals(kept_per_row);
#pragma omp for schedule(static)
    for (std::ptrdiff_t j = 0; j < rows; ++j) {
      // Decode this row's metadata, then accumulate over kept positions only.
      const std::size_t slot0 = static_cast<std::size_t>(j) * kept_per_row;
      const bool bad = decode(index_meta.data(), value_bits.data(), slot0, layout, xt.data(), t,
                                  cols.data(), vals.data());
      if (bad) {
#pragma omp atomic write
        malformed = true;
      }
      accumulate_row(out.data() + j, d_out, cols.data(), vals.data(), kept_per_row, t);
    }
  }
  if (malformed) throw PackError("spmm: malformed packed metadata");
  return out;
}

Tensor spmm(const PackedNMWeights& p, const QuantizedActivations& x) {
  const auto acc = spmm_accumulate(p, x);
  const std::size_t d_out = p.d_out;
  std::vector<float> y(acc.size());
  for (std::size_t i = 0; i < x.rows; ++i) {
    const float s = p.gamma / x.scale[i];
    for (std::size_t j = 0; j < d_out; ++j)
      y[i * d_out + j] = static_cast<float>(acc[i * d_out + j]) * s;
  }
  return Tensor::from({x.rows, d_out}, std::move(y));
}

std::vector<std::int32_t> dense_reference(const TernaryWeights& w, const QuantizedActivations& x) {
  if (x.cols != w.cols) throw ShapeError("dense_reference: inner dimensions differ");
  std::vector<std::int32_t> out(x.rows * w.rows, 0);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < w.rows; ++j) {
      std::int32_t acc = 0;
      for (std::size_t k = 0; k < w.cols; ++k)
        acc += static_cast<std::int32_t>(x.values[i * x.cols + k]) *
               static_cast<std::int32_t>(w.values[j * w.cols + k]);
      out[i * w.rows + j] = acc;
    }
  return out;
}

std::vector<std::int32_t> dense_accumulate(const TernaryWeights& w, const QuantizedActivations& x) {
  if (x.cols != w.cols) throw ShapeError("dense_accumulate: inner dimensions differ");
  const std::size_t t = x.rows, d_in = w.cols, d_out = w.rows;
  const auto xt = transpose_activations(x);
  std::vector<std::int32_t> out(t * d_out);
  const auto rows = static_cast<std::ptrdiff_t>(d_out);
#pragma omp parallel
  {
    std::vector<const std::int16_t*> cols(d_in);
    std::vector<std::int32_t> vals(d_in);
    for (std::size_t k = 0; k < d_in; ++k) cols[k] = xt.data() + k * t;
#pragma omp for schedule(static)
    for (std::ptrdiff_t j = 0; j < rows; ++j) {
      const std::int8_t* wr = w.values.data() + static_cast<std::size_t>(j) * d_in;
      for (std::size_t k = 0; k < d_in; ++k) vals[k] = wr[k];
      accumulate_row(out.data() + j, d_out, cols.data(), vals.data(), d_in, t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string BenchShape::str() const {
  return std::to_string(tokens) + "x" + std::to_string(d_in) + "x" + std::to_string(d_out);
}

BenchShape BenchShape::parse(const std::string& text) {
  BenchShape s;
  unsigned long a = 0, b = 0, c = 0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lux%lux%lu%c", &a, &b, &c, &tail) != 3 || a == 0 || b == 0 || c == 0)
    throw ConfigError("bench shape '" + text + "' is not TOKENSxD_INxD_OUT");
  s.tokens = a;
  s.d_in = b;
  s.d_out = c;
  return s;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename F>
double time_ns(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::nano>(t1 - t0).count();
}

}  // namespace

BenchReport bench(const BenchShape& shape, NMPattern pattern, int repeats, std::uint64_t seed,
                  int threads) {
  if (repeats < 5) throw ConfigError("bench: repeats must be >= 5, got " + std::to_string(repeats));
  pattern.check_cols(shape.d_in);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);

  std::vector<float> master(shape.d_out * shape.d_in);
  for (auto& v : master) v = normal(rng);
  EffectiveWeights eff;
  eff.mask = generate_mask(master, shape.d_out, shape.d_in, pattern);
  eff.weights = ternary_quantize(master, shape.d_out, shape.d_in);
  for (std::size_t i = 0; i < master.size(); ++i)
    if (!eff.mask.bits[i]) eff.weights.values[i] = 0;
  std::vector<float> xs(shape.tokens * shape.d_in);
  for (auto& v : xs) v = normal(rng);
  const auto x = activation_quantize(xs, shape.tokens, shape.d_in);
  const auto packed = pack(eff);

  kernels::ThreadScope scope(threads);
  const auto reference = dense_reference(eff.weights, x);
  const auto dense_out = dense_accumulate(eff.weights, x);
  const auto sparse_out = spmm_accumulate(packed, x);
  if (dense_out != reference || sparse_out != reference)
    throw StateError("bench: kernel output differs from dense_reference for " + shape.str() + " " +
                     pattern.str());

  BenchReport r;
  r.shape = shape;
  r.pattern = pattern;
  r.threads = threads;
  r.checksum = fnv1a(std::span<const std::int32_t>(reference));

  std::vector<std::int32_t> sink;
  for (int w = 0; w < 2; ++w) {
    sink = dense_accumulate(eff.weights, x);
    sink = spmm_accumulate(packed, x);
  }
  std::vector<double> dense_t, sparse_t;
  for (int rep = 0; rep < repeats; ++rep) {
    dense_t.push_back(time_ns([&] { sink = dense_accumulate(eff.weights, x); }));
    sparse_t.push_back(time_ns([&] { sink = spmm_accumulate(packed, x); }));
  }
  r.dense_ns = median(dense_t);
  r.sparse_ns = median(sparse_t);
  r.speedup = r.dense_ns / r.sparse_ns;
  return r;
}

std::string bench_csv_header() { return "shape,pattern,dense_ns,sparse_ns,speedup,checksum"; }

std::string bench_csv_row(const BenchReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%.0f,%.0f,%.6g,%016llx", r.shape.str().c_str(),
                r.pattern.str().c_str(), r.dense_ns, r.sparse_ns, r.speedup,
                static_cast<unsigned long long>(r.checksum));
  return buf;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_packed_file(std::span<const PackedNMWeights> layers) {
  ByteWriter w;
  w.raw(std::string_view(kMagic, 8));
  w.u32(kPackedFormatVersion);
  w.u32(static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    w.u32(l.d_out);
    w.u32(l.d_in);
    w.u16(static_cast<std::uint16_t>(l.pattern.n_keep));
    w.u16(static_cast<std::uint16_t>(l.pattern.group_size));
    w.f32(l.gamma);
    w.u64(l.value_bits.size());
    w.u64(l.index_meta.size());
  }
  for (const auto& l : layers) {
    w.bytes(l.value_bits);
    w.bytes(l.index_meta);
  }
  return w.take();
}

std::vector<PackedNMWeights> decode_packed_file(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 8 || r.raw(8) != std::string(kMagic, 8))
    throw FormatError("not a packed weight file (bad magic)");
  const auto version = r.u32();
  if (version != kPackedFormatVersion)
    throw FormatError("unsupported packed format version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<PackedNMWeights> layers(count);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> lengths(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& l = layers[i];
    l.d_out = r.u32();
    l.d_in = r.u32();
    l.pattern.n_keep = r.u16();
    l.pattern.group_size = r.u16();
    l.gamma = r.f32();
    lengths[i] = {r.u64(), r.u64()};
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    auto v = r.bytes(lengths[i].first);
    layers[i].value_bits.assign(v.begin(), v.end());
    auto x = r.bytes(lengths[i].second);
    layers[i].index_meta.assign(x.begin(), x.end());
    try {
      check_payloads(layers[i]);
    } catch (const std::exception& e) {
      throw FormatError("packed layer " + std::to_string(i) + ": " + e.what());
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after packed payloads");
  return layers;
}

void write_packed_file(const std::filesystem::path& path, std::span<const PackedNMWeights> layers) {
  write_file_bytes(path, encode_packed_file(layers));
}

std::vector<PackedNMWeights> read_packed_file(const std::filesystem::path& path) {
  return decode_packed_file(read_file_bytes(path));
}

}  // namespace sbn
