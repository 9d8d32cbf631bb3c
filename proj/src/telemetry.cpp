#include "sbn/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "sbn/error.hpp"

namespace sbn {

namespace {

double mean_abs(std::span<const float> w) {
  double s = 0.0;
  for (float v : w) s += std::fabs(static_cast<double>(v));
  return w.empty() ? 0.0 : s / static_cast<double>(w.size());
}

void check_options(std::size_t bins, double range) {
  if (bins < 2) throw ConfigError("histogram needs at least 2 bins, got " + std::to_string(bins));
  if (!(range > 0.0)) throw ConfigError("histogram range must be positive");
}

Histogram empty_histogram(std::size_t bins, double lo, double hi) {
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i)
    h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  return h;
}

void add_sample(Histogram& h, double v) {
  const std::size_t bins = h.counts.size();
  const double lo = h.edges.front(), hi = h.edges.back();
  long b = static_cast<long>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
  b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
  ++h.counts[static_cast<std::size_t>(b)];
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::optional<double> near_zero_mass(std::span<const float> w) {
  const MatrixView view{w, 1, w.size()};
  return near_zero_mass(std::span<const MatrixView>(&view, 1));
}

std::optional<double> near_zero_mass(std::span<const MatrixView> pooled) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : pooled) {
    for (float v : m.values) sum += std::fabs(static_cast<double>(v));
    n += m.values.size();
  }
  if (n == 0 || sum == 0.0) return std::nullopt;
  const double cut = 0.5 * sum / static_cast<double>(n);
  std::size_t below = 0;
  for (const auto& m : pooled)
    for (float v : m.values)
      if (std::fabs(static_cast<double>(v)) < cut) ++below;
  return static_cast<double>(below) / static_cast<double>(n);
}

std::uint64_t Histogram::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

std::vector<double> Histogram::density() const {
  std::vector<double> d(counts.size(), 0.0);
  const auto t = total();
  if (t == 0) return d;
  for (std::size_t i = 0; i < counts.size(); ++i)
    d[i] = static_cast<double>(counts[i]) / (static_cast<double>(t) * (edges[i + 1] - edges[i]));
  return d;
}

Histogram weight_histogram(std::span<const float> w, const HistogramOptions& options) {
  const MatrixView view{w, 1, w.size()};
  return weight_histogram(std::span<const MatrixView>(&view, 1), options);
}

Histogram weight_histogram(std::span<const MatrixView> pooled, const HistogramOptions& options) {
  check_options(options.bins, options.range);
  auto h = empty_histogram(options.bins, options.signed_values ? -options.range : 0.0,
                           options.range);
  for (const auto& m : pooled) {
    double denom = 1.0;
    if (options.normalize_by_mean_abs) {
      const double mu = mean_abs(m.values);
      denom = mu > 0.0 ? mu : 1.0;
    }
    for (float v : m.values) {
      const double x = static_cast<double>(v) / denom;
      add_sample(h, options.signed_values ? x : std::fabs(x));
    }
  }
  return h;
}

ThresholdOverlay threshold_overlay(std::span<const MatrixView> pooled, NMPattern pattern,
                                   std::size_t bins, double range) {
  check_options(bins, range);
  ThresholdOverlay out{empty_histogram(bins, 0.0, range), empty_histogram(bins, 0.0, range)};
  for (const auto& m : pooled) {
    const auto thresholds = block_thresholds(m.values, m.rows, m.cols, pattern);
    const double mu = mean_abs(m.values);
    const double denom = mu > 0.0 ? mu : 1.0;
    for (float v : m.values) add_sample(out.weights, std::fabs(static_cast<double>(v)) / denom);
    for (float t : thresholds) add_sample(out.thresholds, static_cast<double>(t) / denom);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string format_value(std::optional<double> v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

std::optional<double> parse_value(const std::string& field) {
  if (field.empty()) return std::nullopt;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(field, &used);
  } catch (const std::exception&) {
    throw FormatError("not a number: '" + field + "'");
  }
  if (used != field.size()) throw FormatError("not a number: '" + field + "'");
  return v;
}

std::string telemetry_csv_header() {
  return "step,train_loss,val_ppl,mean_flip_rate,near_zero_mass,zero_fraction";
}

std::string layer_csv_header() { return "step,layer,flip_rate,near_zero_mass"; }

std::string telemetry_csv(std::span<const TelemetryRecord> records) {
  std::ostringstream os;
  os << telemetry_csv_header() << '\n';
  for (const auto& r : records)
    os << r.step << ',' << format_value(r.train_loss) << ',' << format_value(r.val_ppl) << ','
       << format_value(r.mean_flip_rate) << ',' << format_value(r.near_zero_mass) << ','
       << format_value(r.zero_fraction) << '\n';
  return os.str();
}

std::string layer_csv(std::span<const TelemetryRecord> records) {
  std::ostringstream os;
  os << layer_csv_header() << '\n';
  for (const auto& r : records) {
    const auto layers = std::max(r.layer_flip_rate.size(), r.layer_near_zero_mass.size());
    for (std::size_t l = 0; l < layers; ++l) {
      const auto flip = l < r.layer_flip_rate.size() ? r.layer_flip_rate[l] : std::nullopt;
      const auto nz = l < r.layer_near_zero_mass.size() ? r.layer_near_zero_mass[l] : std::nullopt;
      os << r.step << ',' << l << ',' << format_value(flip) << ',' << format_value(nz) << '\n';
    }
  }
  return os.str();
}

std::vector<TelemetryRecord> parse_telemetry_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || split(line, ',') != split(telemetry_csv_header(), ','))
    throw FormatError("telemetry CSV header mismatch");
  std::vector<TelemetryRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6) throw FormatError("telemetry CSV row has " + std::to_string(f.size()) + " fields");
    TelemetryRecord r;
    const auto step = parse_value(f[0]);
    const auto loss = parse_value(f[1]);
    if (!step || !loss) throw FormatError("telemetry CSV row lacks step or loss");
    r.step = static_cast<std::int64_t>(*step);
    r.train_loss = *loss;
    r.val_ppl = parse_value(f[2]);
    r.mean_flip_rate = parse_value(f[3]);
    r.near_zero_mass = parse_value(f[4]);
    r.zero_fraction = parse_value(f[5]);
    out.push_back(std::move(r));
  }
  return out;
}

std::string overlay_csv_header() { return "bin_left,bin_right,weight_density,threshold_density"; }

std::string overlay_csv(const ThresholdOverlay& overlay) {
  std::ostringstream os;
  os << overlay_csv_header() << '\n';
  const auto wd = overlay.weights.density();
  const auto td = overlay.thresholds.density();
  for (std::size_t i = 0; i < wd.size(); ++i)
    os << format_value(overlay.weights.edges[i]) << ',' << format_value(overlay.weights.edges[i + 1])
       << ',' << format_value(wd[i]) << ',' << format_value(td[i]) << '\n';
  return os.str();
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os << "bin_left,bin_right,count,density\n";
  const auto d = h.density();
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    os << format_value(h.edges[i]) << ',' << format_value(h.edges[i + 1]) << ',' << h.counts[i]
       << ',' << format_value(d[i]) << '\n';
  return os.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace sbn
