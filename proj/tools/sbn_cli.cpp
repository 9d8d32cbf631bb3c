// Command-line front end: train, sweep, ablate, bench, analyze, export.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sbn/checkpoint.hpp"
#include "sbn/corpus.hpp"
#include "sbn/error.hpp"
#include "sbn/kernels.hpp"
#include "sbn/packed_kernel.hpp"
#include "sbn/telemetry.hpp"
#include "sbn/training.hpp"

namespace fs = std::filesystem;
using namespace sbn;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Config file (flat key = value)");
  cmd->add_option("--out", c.out, "Output directory (default: $SBN_OUT/<command> or runs/<command>)");
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--jobs", c.jobs, "Concurrent runs for sweep/ablate")->check(CLI::PositiveNumber);
  cmd->add_option("--set", c.sets, "Config override key=value (repeatable)");
}

fs::path output_dir(const Common& c, const std::string& command) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("SBN_OUT"); env && *env) return fs::path(env) / command;
  return fs::path("runs") / command;
}

ToyLMConfig effective_config(const Common& c) {
  ToyLMConfig cfg;
  if (!c.config.empty()) cfg = ToyLMConfig::load(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> seed_list(const Common& c, const std::string& seeds) {
  if (c.seed) return {*c.seed};
  std::vector<std::uint64_t> out;
  for (const auto& s : split_list(seeds)) {
    try {
      out.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("invalid seed '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("no seeds given");
  return out;
}

std::shared_ptr<const Corpus> load_corpus(const ToyLMConfig& cfg) {
  return std::make_shared<const Corpus>(Corpus::load(cfg.corpus_path));
}

int cmd_train(const Common& c) {
  const auto cfg = effective_config(c);
  const auto dir = output_dir(c, "train");
  const auto r = run_schedule(cfg, load_corpus(cfg), dir);
  std::printf("final_val_ppl %.6g\nresult %s\n", r.final_val_ppl, (dir / "result.json").string().c_str());
  return 0;
}

int cmd_sweep(const Common& c, const std::string& patterns, const std::string& families,
              const std::string& seeds) {
  const auto cfg = effective_config(c);
  std::vector<NMPattern> ps;
  for (const auto& p : split_list(patterns)) ps.push_back(NMPattern::parse(p));
  std::vector<Family> fs_;
  for (const auto& f : split_list(families)) fs_.push_back(parse_family(f));
  const auto dir = output_dir(c, "sweep");
  fs::create_directories(dir);
  write_text_file(dir / "config.txt", cfg.to_text());
  const auto rows = run_sweep(cfg, ps, fs_, seed_list(c, seeds), load_corpus(cfg), c.jobs, dir);
  std::cout << sweep_csv(rows);
  return 0;
}

int cmd_ablate(const Common& c, const std::string& variants, const std::string& seeds) {
  const auto cfg = effective_config(c);
  std::vector<Variant> vs;
  for (const auto& v : split_list(variants)) vs.push_back(parse_variant(v));
  const auto dir = output_dir(c, "ablate");
  fs::create_directories(dir);
  write_text_file(dir / "config.txt", cfg.to_text());
  const auto runs = run_ablation(cfg, vs, seed_list(c, seeds), load_corpus(cfg), c.jobs, dir);
  for (const auto& r : runs)
    std::printf("%s seed %llu final_val_ppl %.6g\n", to_string(r.variant).c_str(),
                static_cast<unsigned long long>(r.seed), r.result.final_val_ppl);
  return 0;
}

int cmd_bench(const Common& c, const std::string& shapes, const std::string& patterns, int repeats,
              int threads) {
  const auto dir = output_dir(c, "bench");
  const std::uint64_t seed = c.seed.value_or(1);
  std::ostringstream csv;
  csv << bench_csv_header() << '\n';
  std::ostringstream threaded;
  threaded << "shape,pattern,threads,dense_ns,sparse_ns,speedup\n";
  for (const auto& s : split_list(shapes))
    for (const auto& p : split_list(patterns)) {
      const auto shape = BenchShape::parse(s);
      const auto pattern = NMPattern::parse(p);
      const auto r = bench(shape, pattern, repeats, seed, 1);
      csv << bench_csv_row(r) << '\n';
      std::printf("%s %s speedup %.3f (1 thread)\n", s.c_str(), p.c_str(), r.speedup);
      if (threads > 1) {
        const auto m = bench(shape, pattern, repeats, seed, threads);
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%s,%d,%.0f,%.0f,%.6g\n", s.c_str(), p.c_str(), threads,
                      m.dense_ns, m.sparse_ns, m.speedup);
        threaded << buf;
      }
    }
  write_text_file(dir / "bench.csv", csv.str());
  if (threads > 1) write_text_file(dir / "bench_threads.csv", threaded.str());
  std::printf("wrote %s\n", (dir / "bench.csv").string().c_str());
  return 0;
}

fs::path resolve_checkpoint(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "final.ckpt";
  if (!fs::exists(p)) throw ConfigError("checkpoint '" + p.string() + "' not found");
  return p;
}

int cmd_analyze(const Common& c, const std::string& checkpoint, const std::string& layers,
                std::size_t bins, double range) {
  const auto model = load_model(resolve_checkpoint(checkpoint));
  const auto& lin = model->linears();
  std::size_t first = 0, last = lin.size();
  if (!layers.empty()) {
    unsigned long a = 0, b = 0;
    char tail = 0;
    if (std::sscanf(layers.c_str(), "%lu:%lu%c", &a, &b, &tail) != 2 || a >= b || b > lin.size())
      throw ConfigError("--layers expects A:B with 0 <= A < B <= " + std::to_string(lin.size()));
    first = a;
    last = b;
  }
  std::vector<MatrixView> views;
  std::ostringstream nz;
  nz << "layer,d_out,d_in,near_zero_mass\n";
  for (std::size_t i = first; i < last; ++i) {
    const auto w = lin[i].master().values();
    views.push_back({w, lin[i].d_out(), lin[i].d_in()});
    nz << i << ',' << lin[i].d_out() << ',' << lin[i].d_in() << ',' << format_value(near_zero_mass(w)) << '\n';
  }
  nz << "all,,," << format_value(near_zero_mass(views)) << '\n';
  const auto dir = output_dir(c, "analyze");
  write_text_file(dir / "near_zero_mass.csv", nz.str());
  HistogramOptions ho;
  ho.bins = bins;
  ho.range = range;
  write_text_file(dir / "histogram.csv", histogram_csv(weight_histogram(views, ho)));
  ho.signed_values = true;
  write_text_file(dir / "histogram_signed.csv", histogram_csv(weight_histogram(views, ho)));
  NMPattern pattern = model->config().pattern;
  if (pattern.dense()) {
    std::printf("pattern %s keeps every weight; using 6:8 for the threshold overlay\n", pattern.str().c_str());
    pattern = {6, 8};
  }
  write_text_file(dir / "overlay.csv", overlay_csv(threshold_overlay(views, pattern, bins, range)));
  std::printf("wrote near_zero_mass.csv, histogram.csv, histogram_signed.csv, overlay.csv to %s\n",
              dir.string().c_str());
  return 0;
}

int cmd_export(const Common& c, const std::string& checkpoint) {
  const auto model = load_model(resolve_checkpoint(checkpoint));
  const auto packed = export_packed(*model);
  fs::path out = c.out.empty() ? output_dir(c, "export") / "model.sbnpack" : fs::path(c.out);
  if (fs::is_directory(out)) out /= "model.sbnpack";
  write_packed_file(out, packed);
  const auto back = read_packed_file(out);
  if (back != packed) throw StateError("packed file did not read back identically");
  std::printf("wrote %zu layers to %s\n", packed.size(), out.string().c_str());
  return 0;
}

int cmd_make_corpus(const std::string& out, std::size_t bytes, std::uint64_t seed) {
  write_text_file(out, generate_synthetic_corpus(bytes, seed));
  std::printf("wrote %zu bytes to %s\n", bytes, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse ternary N:M training lab"};
  app.require_subcommand(1);

  Common train_c, sweep_c, ablate_c, bench_c, analyze_c, export_c;

  auto* train = app.add_subcommand("train", "Train one configuration");
  add_common(train, train_c);

  auto* sweep = app.add_subcommand("sweep", "N:M patterns x weight families, normalised perplexity");
  add_common(sweep, sweep_c);
  std::string sweep_patterns = "8:8,6:8,4:8,2:4", sweep_families = "bitnet,float", sweep_seeds = "1,2,3";
  sweep->add_option("--patterns", sweep_patterns, "Comma-separated N:M list (must contain 8:8)");
  sweep->add_option("--families", sweep_families, "Comma-separated: bitnet,float");
  sweep->add_option("--seeds", sweep_seeds, "Comma-separated seeds (ignored with --seed)");

  auto* ablate = app.add_subcommand("ablate", "Compare the layer variants under one config");
  add_common(ablate, ablate_c);
  std::string ablate_variants = "quant_then_mask,mask_without_grad,mask_from_quantized,sparse_before_quant";
  std::string ablate_seeds = "1,2,3";
  ablate->add_option("--variants", ablate_variants, "Comma-separated variant names");
  ablate->add_option("--seeds", ablate_seeds, "Comma-separated seeds (ignored with --seed)");

  auto* benchc = app.add_subcommand("bench", "Packed sparse kernel vs matched dense kernel");
  add_common(benchc, bench_c);
  std::string bench_shapes = "256x1024x1024,256x2048x2048", bench_patterns = "8:8,6:8,4:8,2:4";
  int repeats = 7, threads = 1;
  benchc->add_option("--shapes", bench_shapes, "Comma-separated TOKENSxD_INxD_OUT");
  benchc->add_option("--patterns", bench_patterns, "Comma-separated N:M list");
  benchc->add_option("--repeats", repeats, "Timed repeats per kernel (>= 5)");
  benchc->add_option("--threads", threads, "Also report a multi-threaded measurement")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "Weight-distribution analyses of a checkpoint");
  add_common(analyze, analyze_c);
  std::string analyze_ckpt, layer_range;
  std::size_t bins = 101;
  double range = 3.0;
  analyze->add_option("checkpoint", analyze_ckpt, "Checkpoint file or run directory")->required();
  analyze->add_option("--layers", layer_range, "Half-open projection layer range A:B");
  analyze->add_option("--bins", bins, "Histogram bins");
  analyze->add_option("--range", range, "Histogram upper edge in units of mean|w|");

  auto* exportc = app.add_subcommand("export", "Write a checkpoint's effective weights as a packed file");
  add_common(exportc, export_c);
  std::string export_ckpt;
  exportc->add_option("checkpoint", export_ckpt, "Checkpoint file or run directory")->required();

  auto* corpus = app.add_subcommand("make-corpus", "Generate the synthetic training text");
  std::string corpus_out = "data/corpus.txt";
  std::size_t corpus_bytes = 2000000;
  std::uint64_t corpus_seed = 1;
  corpus->add_option("--out", corpus_out, "Output file");
  corpus->add_option("--bytes", corpus_bytes, "Size in bytes");
  corpus->add_option("--seed", corpus_seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_c);
    if (*sweep) return cmd_sweep(sweep_c, sweep_patterns, sweep_families, sweep_seeds);
    if (*ablate) return cmd_ablate(ablate_c, ablate_variants, ablate_seeds);
    if (*benchc) return cmd_bench(bench_c, bench_shapes, bench_patterns, repeats, threads);
    if (*analyze) return cmd_analyze(analyze_c, analyze_ckpt, layer_range, bins, range);
    if (*exportc) return cmd_export(export_c, export_ckpt);
    if (*corpus) return cmd_make_corpus(corpus_out, corpus_bytes, corpus_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
