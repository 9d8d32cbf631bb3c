#pragma once

// Training telemetry rows and the offline weight-distribution analyses:
// near-zero mass, magnitude histograms and the block-threshold overlay.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbn/nm_sparsity.hpp"

namespace sbn {

// A weight matrix view used by the pooled analyses.
struct MatrixView {
  std::span<const float> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Fraction of entries with |w| < 0.5 * mean|w|. nullopt when mean|w| == 0
// or the input is empty.
std::optional<double> near_zero_mass(std::span<const float> w);
// Pooled over several tensors: one mean over all entries.
std::optional<double> near_zero_mass(std::span<const MatrixView> pooled);

struct Histogram {
  std::vector<double> edges;          // bins + 1, ascending
  std::vector<std::uint64_t> counts;  // bins
  std::uint64_t total() const;
  // counts / (total * bin width); zero when total == 0.
  std::vector<double> density() const;
};

struct HistogramOptions {
  std::size_t bins = 101;
  double range = 3.0;                 // [0, range] for magnitudes, [-range, range] signed
  bool normalize_by_mean_abs = true;  // divide by mean|w| of each tensor
  bool signed_values = false;         // histogram w instead of |w|
};

// Values outside the range land in the edge bins, so counts sum to the entry
// count. Throws ConfigError when bins < 2 or range <= 0.
Histogram weight_histogram(std::span<const float> w, const HistogramOptions& options = {});
Histogram weight_histogram(std::span<const MatrixView> pooled, const HistogramOptions& options = {});

struct ThresholdOverlay {
  Histogram weights;     // |w| / mean|w|
  Histogram thresholds;  // block threshold / mean|w|, one entry per group
};

// Both histograms over magnitudes normalised by each tensor's own mean|w|,
// sharing bin edges over [0, range]. Throws PatternError as block_thresholds.
ThresholdOverlay threshold_overlay(std::span<const MatrixView> pooled, NMPattern pattern,
                                   std::size_t bins = 101, double range = 3.0);

// ---------------------------------------------------------------------------

struct TelemetryRecord {
  std::int64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_ppl;
  std::optional<double> mean_flip_rate;
  std::optional<double> near_zero_mass;
  std::optional<double> zero_fraction;
  std::vector<std::optional<double>> layer_flip_rate;
  std::vector<std::optional<double>> layer_near_zero_mass;
};

// Six significant digits; absent values become empty fields.
std::string format_value(std::optional<double> v);
std::optional<double> parse_value(const std::string& field);

std::string telemetry_csv_header();
std::string layer_csv_header();

std::string telemetry_csv(std::span<const TelemetryRecord> records);
// step,layer,flip_rate,near_zero_mass; one row per (step, layer).
std::string layer_csv(std::span<const TelemetryRecord> records);
// Parses the main telemetry table. Per-layer columns are not part of it.
std::vector<TelemetryRecord> parse_telemetry_csv(const std::string& text);

std::string overlay_csv_header();
std::string overlay_csv(const ThresholdOverlay& overlay);
std::string histogram_csv(const Histogram& h);  // bin_left,bin_right,count,density

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace sbn
