#pragma once

// Training loop, dense-to-sparse schedule, evaluation, and the sweep and
// ablation orchestrators built on top of it.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sbn/corpus.hpp"
#include "sbn/rng.hpp"
#include "sbn/telemetry.hpp"
#include "sbn/toy_lm.hpp"

namespace sbn {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.1;
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(const std::vector<Parameter>& params, AdamWOptions options);

  // Decoupled weight decay on parameters flagged for it. Reads each
  // parameter's grad (missing grad counts as zero).
  void step(std::vector<Parameter>& params, double lr);

  std::int64_t steps() const { return t_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  AdamWOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t t_ = 0;
};

// Linear warmup then cosine decay to min_lr_frac * lr; step_index is 0-based.
double learning_rate(const ToyLMConfig& cfg, std::int64_t step_index);

// Scales all gradients so their global L2 norm is at most max_norm (0 disables).
// Returns the norm before clipping.
double clip_grad_norm(std::vector<Parameter>& params, double max_norm);

// Steps (1-based, as in telemetry) at which validation runs: every 5% of the
// schedule and the final step.
std::vector<std::int64_t> eval_steps(std::int64_t total_steps);

class Trainer {
 public:
  Trainer(ToyLMConfig cfg, std::shared_ptr<const Corpus> corpus);

  // One optimisation step; returns its telemetry row (validation filled in
  // on evaluation steps).
  const TelemetryRecord& step();
  // exp(mean NLL) over the fixed validation windows. Leaves every parameter
  // and layer state untouched.
  double evaluate();
  // Runs the remaining steps.
  void run();

  std::int64_t steps_done() const { return step_; }
  bool finished() const { return step_ >= cfg_.total_steps; }
  const ToyLMConfig& config() const { return cfg_; }
  ToyLM& model() { return *model_; }
  const ToyLM& model() const { return *model_; }
  AdamW& optimizer() { return opt_; }
  const AdamW& optimizer() const { return opt_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  const Corpus& corpus() const { return *corpus_; }
  const std::vector<TelemetryRecord>& records() const { return records_; }
  std::vector<TelemetryRecord>& records() { return records_; }

  // Used by checkpoint restore.
  void set_steps_done(std::int64_t s);

 private:
  ToyLMConfig cfg_;
  std::shared_ptr<const Corpus> corpus_;
  std::unique_ptr<ToyLM> model_;
  AdamW opt_;
  Rng rng_;
  std::vector<Batch> val_batches_;
  std::vector<std::int64_t> eval_at_;
  std::vector<TelemetryRecord> records_;
  std::int64_t step_ = 0;
};

// Effective vocabulary for a config on a corpus. Throws ConfigError if the
// configured size cannot hold the alphabet.
std::size_t resolve_vocab(const ToyLMConfig& cfg, const Corpus& corpus);

struct RunResult {
  std::string config_hash;
  double final_val_ppl = 0.0;
  std::vector<std::pair<std::int64_t, double>> ppl_curve;
  std::string telemetry_path;  // empty when the run was not written to disk
  std::vector<TelemetryRecord> records;
};

std::string run_result_json(const RunResult& r);

// Trains one config to completion. With an output directory, writes
// config.txt, telemetry.csv, layers.csv, result.json and final.ckpt there.
RunResult run_schedule(const ToyLMConfig& cfg, std::shared_ptr<const Corpus> corpus,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Runs independent configs on up to `jobs` worker threads. Results keep the
// input order. Output directories, when given, must be distinct.
std::vector<RunResult> run_many(const std::vector<ToyLMConfig>& configs,
                                std::shared_ptr<const Corpus> corpus, int jobs,
                                const std::vector<std::optional<std::filesystem::path>>& out_dirs);

enum class Family { Float, BitNet };
std::string to_string(Family f);
Family parse_family(const std::string& text);

struct SweepRow {
  Family family = Family::BitNet;
  NMPattern pattern;
  std::uint64_t seed = 0;
  double ppl = 0.0;
  double norm_ppl = 0.0;  // ppl / ppl of the same family and seed at 8:8
};

// One run per (family, pattern, seed). The pattern list must contain 8:8
// (ConfigError otherwise).
std::vector<SweepRow> run_sweep(const ToyLMConfig& base, const std::vector<NMPattern>& patterns,
                                const std::vector<Family>& families,
                                const std::vector<std::uint64_t>& seeds,
                                std::shared_ptr<const Corpus> corpus, int jobs,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct AblationRun {
  Variant variant;
  std::uint64_t seed;
  RunResult result;
};

std::vector<AblationRun> run_ablation(const ToyLMConfig& base, const std::vector<Variant>& variants,
                                      const std::vector<std::uint64_t>& seeds,
                                      std::shared_ptr<const Corpus> corpus, int jobs,
                                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);
// Aligned per-step tables, one column per (variant, seed).
std::string ablation_ppl_csv(const std::vector<AblationRun>& runs);
std::string ablation_flip_csv(const std::vector<AblationRun>& runs);

// Mean of the available mean_flip_rate values over records whose 1-based
// step lies in [first, last]. nullopt when none are available.
std::optional<double> mean_flip_rate(const std::vector<TelemetryRecord>& records,
                                     std::int64_t first, std::int64_t last);

}  // namespace sbn
