#pragma once

// Character-level pre-norm decoder whose attention and MLP projections are
// Sparse-BitLinear layers (ternary) or the same layers in float precision.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sbn/nm_sparsity.hpp"
#include "sbn/sparse_bitlinear.hpp"
#include "sbn/tensor.hpp"

namespace sbn {

enum class WeightMode { FloatDense, FloatSparse, BitNetDense, BitNetSparse };

std::string to_string(WeightMode m);
WeightMode parse_weight_mode(const std::string& text);

inline bool is_ternary(WeightMode m) {
  return m == WeightMode::BitNetDense || m == WeightMode::BitNetSparse;
}
inline bool uses_sparsity(WeightMode m) {
  return m == WeightMode::FloatSparse || m == WeightMode::BitNetSparse;
}

struct ToyLMConfig {
  // Model.
  std::size_t vocab_size = 0;  // 0: take the corpus alphabet size
  std::size_t context_length = 64;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_mult = 4;
  bool tie_embeddings = false;
  double init_std = 0.02;
  WeightMode weight_mode = WeightMode::BitNetSparse;
  NMPattern pattern{6, 8};
  Variant variant = Variant::QuantThenMaskDenseGrad;
  SteMode ste = SteMode::Identity;
  int sparse_ratio = 100;  // percent of steps trained under the N:M constraint

  // Optimisation.
  double lr = 3e-4;
  double min_lr_frac = 0.1;
  double warmup_frac = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-5;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::int64_t total_steps = 2000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  std::size_t eval_batches = 8;

  std::string corpus_path = "data/corpus.txt";

  // Sets one key from its text form. Throws ConfigError on unknown keys or
  // unparsable values.
  void set(const std::string& key, const std::string& value);
  // Flat "key = value" lines; '#' starts a comment.
  static ToyLMConfig parse(const std::string& text);
  static ToyLMConfig parse(const std::string& text, ToyLMConfig base);
  static ToyLMConfig load(const std::filesystem::path& path);
  static ToyLMConfig load(const std::filesystem::path& path, ToyLMConfig base);
  // Canonical text form listing every key; parse(to_text()) reproduces the config.
  std::string to_text() const;
  // FNV-1a of to_text(), as 16 hex digits.
  std::string hash() const;
  // Throws ConfigError on inconsistent settings.
  void validate() const;

  // 0-based step index from which the N:M constraint applies.
  std::int64_t sparse_start() const;
  bool sparse_at(std::int64_t step_index) const;

  bool operator==(const ToyLMConfig&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  bool decay = false;
};

class ToyLM {
 public:
  ToyLM(const ToyLMConfig& cfg, std::size_t vocab_size);

  // Mean next-token cross-entropy over a [batch, seq] window.
  Tensor loss(std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
              std::size_t batch, std::size_t seq);
  // Logits [batch * seq, vocab].
  Tensor logits(std::span<const std::int32_t> inputs, std::size_t batch, std::size_t seq);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  // Projection layers in a fixed order: per block q, k, v, o, up, down.
  std::vector<SparseBitLinear>& linears() { return linears_; }
  const std::vector<SparseBitLinear>& linears() const { return linears_; }

  void set_sparsity_enabled(bool enabled);
  std::size_t parameter_count() const;
  static std::size_t expected_parameter_count(const ToyLMConfig& cfg, std::size_t vocab_size);

  const ToyLMConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_; }

 private:
  ToyLMConfig cfg_;
  std::size_t vocab_;
  std::vector<Parameter> params_;
  std::vector<SparseBitLinear> linears_;
  Tensor tok_emb_, pos_emb_, final_gain_, head_;
  std::vector<Tensor> gains_;  // two per block
};

}  // namespace sbn
