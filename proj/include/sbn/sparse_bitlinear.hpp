#pragma once

// Sparse-BitLinear: a bias-free linear layer whose forward pass uses
// per-step N:M masked ternary weights and int8 activations, and whose
// backward pass treats both the quantizer and the mask as identity
// (unless the variant says otherwise).

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbn/nm_sparsity.hpp"
#include "sbn/quantizers.hpp"
#include "sbn/tensor.hpp"

namespace sbn {

enum class Variant {
  QuantThenMaskDenseGrad,  // mask from |master|, W_eff = Q(W) * mask, dense gradients
  MaskWithoutGrad,         // same forward, gradients gated by the mask
  MaskFromQuantized,       // mask from |Q(W)| (ties resolved by index)
  SparseBeforeQuant,       // W_eff = Q(mask * W), gamma from the masked matrix
};

// Float32 is the full-precision baseline: same masking machinery, no quantizers.
enum class Precision { Float32, Ternary };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct EffectiveWeights {
  TernaryWeights weights;  // values zero wherever mask is 0
  NMMask mask;
};

struct LayerOptions {
  NMPattern pattern{8, 8};
  Variant variant = Variant::QuantThenMaskDenseGrad;
  Precision precision = Precision::Ternary;
  bool sparsity_enabled = true;
  SteMode ste = SteMode::Identity;
};

struct LayerGradients {
  std::vector<float> grad_input;   // [t, d_in]
  std::vector<float> grad_master;  // [d_out, d_in]
};

class SparseBitLinear {
 public:
  // master: [d_out, d_in] leaf tensor with requires_grad.
  SparseBitLinear(Tensor master, LayerOptions options);

  // x: [t, d_in] -> [t, d_out]. Recomputes the mask from the current master.
  // When gradients are disabled (evaluation) the layer's telemetry state is
  // left untouched.
  Tensor forward(const Tensor& x);

  // Forward with externally supplied effective weights (ternary precision
  // only). Skips mask generation and quantization.
  Tensor forward_with(const Tensor& x, const EffectiveWeights& effective);

  // Explicit backward through the state saved by the last forward. The
  // autodiff graph uses the same rule. Throws StateError without a forward.
  LayerGradients backward(std::span<const float> grad_out) const;

  // Mask and discrete weights the next forward would use (ternary precision).
  EffectiveWeights effective_weights() const;
  NMMask current_mask() const;

  void set_sparsity_enabled(bool enabled);
  // Throws ConfigError when the variant changes after a training forward.
  void set_variant(Variant v);

  bool sparsity_enabled() const { return options_.sparsity_enabled; }
  Variant variant() const { return options_.variant; }
  const LayerOptions& options() const { return options_; }
  Tensor& master() { return master_; }
  const Tensor& master() const { return master_; }
  std::size_t d_out() const { return master_.rows(); }
  std::size_t d_in() const { return master_.cols(); }

  // Telemetry from the most recent training forward.
  const std::optional<NMMask>& last_mask() const { return last_mask_; }
  std::optional<double> last_flip_rate() const { return last_flip_rate_; }
  // FNV-1a of the master values at the moment the last mask was computed.
  std::uint64_t master_hash_at_mask() const;
  std::int64_t training_forwards() const { return forwards_; }

  // Used by checkpoint restore so flip rates continue seamlessly.
  void restore_telemetry(std::optional<NMMask> last_mask, std::int64_t forwards);

  struct Saved;

 private:
  Tensor run(const Tensor& x, const EffectiveWeights* forced);
  void record_mask(const NMMask& mask);

  Tensor master_;
  LayerOptions options_;
  std::shared_ptr<const Saved> saved_;
  std::optional<NMMask> last_mask_;
  std::optional<double> last_flip_rate_;
  std::vector<float> master_at_mask_;
  std::int64_t forwards_ = 0;
};

}  // namespace sbn
