#pragma once

// Character-level corpus: a fixed alphabet, a training prefix and a held-out
// tail used for validation.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sbn/rng.hpp"

namespace sbn {

class Corpus {
 public:
  // Alphabet is the sorted set of bytes in the whole text; the last
  // val_fraction of the text becomes the validation split.
  static Corpus from_text(const std::string& text, double val_fraction = 0.05);
  static Corpus load(const std::filesystem::path& path, double val_fraction = 0.05);

  std::size_t vocab_size() const { return alphabet_.size(); }
  const std::string& alphabet() const { return alphabet_; }
  const std::vector<std::int32_t>& train() const { return train_; }
  const std::vector<std::int32_t>& val() const { return val_; }

  std::vector<std::int32_t> encode(const std::string& text) const;
  std::string decode(std::span<const std::int32_t> ids) const;

 private:
  std::string alphabet_;
  std::int32_t lookup_[256] = {};
  std::vector<std::int32_t> train_;
  std::vector<std::int32_t> val_;
};

// Next-token batch: inputs and targets, both [batch * seq] row-major.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};

// Random windows from the training split.
Batch sample_batch(const std::vector<std::int32_t>& ids, std::size_t batch, std::size_t seq, Rng& rng);
// Deterministic evenly spaced windows (validation).
std::vector<Batch> fixed_batches(const std::vector<std::int32_t>& ids, std::size_t count,
                                 std::size_t batch, std::size_t seq);

// English-like text from a small stochastic grammar: learnable spelling,
// word order and punctuation at character level. Deterministic in the seed.
std::string generate_synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace sbn
