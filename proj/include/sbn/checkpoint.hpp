#pragma once

// Training checkpoints ("SBNCKPT1"): config, step counter, sampler state,
// float masters, AdamW moments, per-layer mask state and telemetry history.
// Restoring one and continuing reproduces uninterrupted training bit-exactly.

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "sbn/packed_kernel.hpp"
#include "sbn/toy_lm.hpp"
#include "sbn/training.hpp"

namespace sbn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Trainer& trainer);
void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer);

// Restores into a trainer built from the same config and vocabulary.
// Throws FormatError on bad files and ConfigError on a config mismatch.
void restore_checkpoint(std::span<const std::uint8_t> bytes, Trainer& trainer);
void load_checkpoint(const std::filesystem::path& path, Trainer& trainer);

// Config stored in a checkpoint, without building anything.
ToyLMConfig checkpoint_config(const std::filesystem::path& path);

// Model weights and layer state only; no corpus needed.
std::unique_ptr<ToyLM> load_model(const std::filesystem::path& path);

// Effective ternary weights of every projection layer, packed. Throws
// ConfigError for float-precision models.
std::vector<PackedNMWeights> export_packed(const ToyLM& model);

}  // namespace sbn
