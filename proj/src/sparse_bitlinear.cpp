#include "sbn/sparse_bitlinear.hpp"

#include <cmath>

#include "sbn/error.hpp"
#include "sbn/hash.hpp"
#include "sbn/kernels.hpp"

namespace sbn {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::QuantThenMaskDenseGrad: return "quant_then_mask";
    case Variant::MaskWithoutGrad: return "mask_without_grad";
    case Variant::MaskFromQuantized: return "mask_from_quantized";
    case Variant::SparseBeforeQuant: return "sparse_before_quant";
  }
  return "unknown";
}

Variant parse_variant(const std::string& text) {
  for (auto v : {Variant::QuantThenMaskDenseGrad, Variant::MaskWithoutGrad,
                 Variant::MaskFromQuantized, Variant::SparseBeforeQuant})
    if (to_string(v) == text) return v;
  throw ConfigError("unknown variant '" + text + "'");
}

struct SparseBitLinear::Saved {
  std::size_t tokens = 0, d_in = 0, d_out = 0;
  std::vector<float> x_used;  // dequantized activations (or raw x for float layers)
  std::vector<float> w_used;  // gamma * W_eff (or master * mask)
  std::vector<std::uint8_t> grad_gate;  // empty: no gating
};

namespace {

LayerGradients apply_backward(const SparseBitLinear::Saved& s, std::span<const float> g) {
  if (g.size() != s.tokens * s.d_out)
    throw ShapeError("sparse_bitlinear backward: gradient has " + std::to_string(g.size()) +
                     " entries, expected " + std::to_string(s.tokens * s.d_out));
  LayerGradients out;
  out.grad_input.resize(s.tokens * s.d_in);
  out.grad_master.resize(s.d_out * s.d_in);
  kernels::gemm_nn(g, s.w_used, out.grad_input, s.tokens, s.d_out, s.d_in);
  kernels::gemm_tn(g, s.x_used, out.grad_master, s.d_out, s.tokens, s.d_in);
  if (!s.grad_gate.empty())
    for (std::size_t i = 0; i < out.grad_master.size(); ++i)
      if (!s.grad_gate[i]) out.grad_master[i] = 0.0f;
  return out;
}

}  // namespace

SparseBitLinear::SparseBitLinear(Tensor master, LayerOptions options)
    : master_(std::move(master)), options_(options) {
  if (master_.shape().size() != 2) throw ShapeError("SparseBitLinear: master must be 2-D");
  options_.pattern.validate();
  if (options_.sparsity_enabled) options_.pattern.check_cols(master_.cols());
}

NMMask SparseBitLinear::current_mask() const {
  const std::size_t rows = d_out(), cols = d_in();
  if (!options_.sparsity_enabled) {
    const NMPattern full{options_.pattern.group_size, options_.pattern.group_size};
    return NMMask::ones(rows, cols, full);
  }
  if (options_.variant == Variant::MaskFromQuantized) {
    const auto wq = ternary_quantize(master_);
    return generate_mask(std::span<const std::int8_t>(wq.values), rows, cols, options_.pattern);
  }
  return generate_mask(master_.values(), rows, cols, options_.pattern);
}

EffectiveWeights SparseBitLinear::effective_weights() const {
  if (options_.precision != Precision::Ternary)
    throw StateError("effective_weights: layer is not ternary");
  EffectiveWeights eff;
  eff.mask = current_mask();
  if (options_.sparsity_enabled && options_.variant == Variant::SparseBeforeQuant) {
    std::vector<float> masked(master_.values().begin(), master_.values().end());
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (!eff.mask.bits[i]) masked[i] = 0.0f;
    eff.weights = ternary_quantize(masked, d_out(), d_in());
  } else {
    eff.weights = ternary_quantize(master_);
    for (std::size_t i = 0; i < eff.weights.values.size(); ++i)
      if (!eff.mask.bits[i]) eff.weights.values[i] = 0;
  }
  return eff;
}

void SparseBitLinear::record_mask(const NMMask& mask) {
  if (last_mask_ && last_mask_->pattern == mask.pattern && last_mask_->rows == mask.rows &&
      last_mask_->cols == mask.cols)
    last_flip_rate_ = flip_rate(mask, *last_mask_);
  else
    last_flip_rate_.reset();
  last_mask_ = mask;
  master_at_mask_.assign(master_.values().begin(), master_.values().end());
  ++forwards_;
}

Tensor SparseBitLinear::forward(const Tensor& x) { return run(x, nullptr); }

Tensor SparseBitLinear::forward_with(const Tensor& x, const EffectiveWeights& effective) {
  if (options_.precision != Precision::Ternary)
    throw StateError("forward_with: layer is not ternary");
  if (effective.weights.rows != d_out() || effective.weights.cols != d_in())
    throw ShapeError("forward_with: effective weights do not match the master shape");
  return run(x, &effective);
}

Tensor SparseBitLinear::run(const Tensor& x, const EffectiveWeights* forced) {
  if (x.shape().size() != 2 || x.cols() != d_in())
    throw ShapeError("sparse_bitlinear: input " + shape_str(x.shape()) + " does not match d_in=" +
                     std::to_string(d_in()));
  const bool training = grad_enabled();
  const std::size_t t = x.rows(), n = d_out(), k = d_in();
  auto saved = std::make_shared<Saved>();
  saved->tokens = t;
  saved->d_in = k;
  saved->d_out = n;
  std::vector<float> y(t * n);
  NMMask mask;

  if (options_.precision == Precision::Ternary) {
    EffectiveWeights eff = forced ? *forced : effective_weights();
    const auto q = activation_quantize(x);
    std::vector<std::int32_t> acc(t * n);
    kernels::int8_gemm_nt(q.values, eff.weights.values, acc, t, k, n);
    for (std::size_t i = 0; i < t; ++i) {
      const float s = eff.weights.gamma / q.scale[i];
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] = static_cast<float>(acc[i * n + j]) * s;
    }
    if (training) {
      saved->x_used.resize(t * k);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < k; ++j)
          saved->x_used[i * k + j] = static_cast<float>(q.values[i * k + j]) / q.scale[i];
      saved->w_used.resize(n * k);
      for (std::size_t i = 0; i < n * k; ++i)
        saved->w_used[i] = eff.weights.gamma * static_cast<float>(eff.weights.values[i]);
    }
    if (training && options_.ste == SteMode::Clipped) {
      const float denom = absmean_scale(master_.values()) + kQuantEps;
      saved->grad_gate.assign(n * k, 1);
      auto mv = master_.values();
      for (std::size_t i = 0; i < n * k; ++i)
        if (std::fabs(mv[i] / denom) > 1.0f) saved->grad_gate[i] = 0;
    }
    mask = std::move(eff.mask);
  } else {
    mask = current_mask();
    auto mv = master_.values();
    saved->w_used.resize(n * k);
    for (std::size_t i = 0; i < n * k; ++i) saved->w_used[i] = mask.bits[i] ? mv[i] : 0.0f;
    saved->x_used.assign(x.values().begin(), x.values().end());
    kernels::gemm_nt(saved->x_used, saved->w_used, y, t, k, n);
  }

  if (training && options_.variant == Variant::MaskWithoutGrad && options_.sparsity_enabled) {
    if (saved->grad_gate.empty()) saved->grad_gate.assign(n * k, 1);
    for (std::size_t i = 0; i < n * k; ++i) saved->grad_gate[i] &= mask.bits[i];
  }

  if (training) {
    record_mask(mask);
    saved_ = saved;
  }
  std::shared_ptr<const Saved> keep = saved;
  return custom_grad("sparse_bitlinear", {x, master_}, {t, n}, std::move(y),
                     [keep](std::span<const float> g) {
                       auto r = apply_backward(*keep, g);
                       return std::vector<std::vector<float>>{std::move(r.grad_input),
                                                              std::move(r.grad_master)};
                     });
}

LayerGradients SparseBitLinear::backward(std::span<const float> grad_out) const {
  if (!saved_) throw StateError("sparse_bitlinear: backward called before forward");
  return apply_backward(*saved_, grad_out);
}

void SparseBitLinear::set_sparsity_enabled(bool enabled) {
  if (enabled == options_.sparsity_enabled) return;
  if (enabled) options_.pattern.check_cols(d_in());
  options_.sparsity_enabled = enabled;
  // Masks from the other regime are not comparable.
  last_mask_.reset();
  last_flip_rate_.reset();
}

void SparseBitLinear::set_variant(Variant v) {
  if (v == options_.variant) return;
  if (forwards_ > 0)
    throw ConfigError("variant cannot change mid-run (" + to_string(options_.variant) + " -> " +
                      to_string(v) + ")");
  options_.variant = v;
}

std::uint64_t SparseBitLinear::master_hash_at_mask() const {
  return fnv1a(std::span<const float>(master_at_mask_));
}

void SparseBitLinear::restore_telemetry(std::optional<NMMask> last_mask, std::int64_t forwards) {
  last_mask_ = std::move(last_mask);
  last_flip_rate_.reset();
  forwards_ = forwards;
}

}  // namespace sbn
