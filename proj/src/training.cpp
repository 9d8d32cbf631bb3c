#include "sbn/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "sbn/checkpoint.hpp"
#include "sbn/error.hpp"
#include "sbn/kernels.hpp"
#include "sbn/quantizers.hpp"

namespace sbn {

AdamW::AdamW(const std::vector<Parameter>& params, AdamWOptions options) : opt_(options) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.size(), 0.0f);
    v_.emplace_back(p.value.size(), 0.0f);
  }
}

void AdamW::step(std::vector<Parameter>& params, double lr) {
  if (params.size() != m_.size()) throw StateError("AdamW: parameter list changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(opt_.beta1), b2 = static_cast<float>(opt_.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(opt_.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto w = p.value.mutable_values();
    if (w.size() != m_[i].size()) throw StateError("AdamW: parameter " + p.name + " changed size");
    const bool has = p.value.has_grad();
    const auto g = has ? p.value.grad() : std::span<const float>();
    const float decay = p.decay ? static_cast<float>(lr * opt_.weight_decay) : 0.0f;
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float gj = has ? g[j] : 0.0f;
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      w[j] -= decay * w[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
    check_finite("adamw:" + p.name, w);
  }
}

double learning_rate(const ToyLMConfig& cfg, std::int64_t step_index) {
  const std::int64_t total = cfg.total_steps;
  const auto warm = static_cast<std::int64_t>(std::ceil(cfg.warmup_frac * static_cast<double>(total)));
  if (step_index < warm) return cfg.lr * static_cast<double>(step_index + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::int64_t>(1, total - warm));
  const double progress = std::min(1.0, static_cast<double>(step_index - warm) / span);
  const double cosine = 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
  return cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cosine);
}

double clip_grad_norm(std::vector<Parameter>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.value.has_grad())
      for (float g : p.value.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& p : params)
      if (p.value.has_grad())
        for (auto& g : p.value.mutable_grad()) g *= s;
  }
  return norm;
}

std::vector<std::int64_t> eval_steps(std::int64_t total_steps) {
  std::vector<std::int64_t> out;
  for (std::int64_t k = 1; k <= 20; ++k) {
    const std::int64_t s = std::max<std::int64_t>(1, (k * total_steps + 19) / 20);
    if (out.empty() || out.back() != s) out.push_back(s);
  }
  if (out.back() != total_steps) out.push_back(total_steps);
  return out;
}

std::size_t resolve_vocab(const ToyLMConfig& cfg, const Corpus& corpus) {
  if (cfg.vocab_size == 0) return corpus.vocab_size();
  if (cfg.vocab_size < corpus.vocab_size())
    throw ConfigError("vocab_size " + std::to_string(cfg.vocab_size) + " is smaller than the corpus alphabet (" +
                      std::to_string(corpus.vocab_size()) + ")");
  return cfg.vocab_size;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(ToyLMConfig cfg, std::shared_ptr<const Corpus> corpus)
    : cfg_(std::move(cfg)), corpus_(std::move(corpus)), rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
  if (!corpus_) throw ConfigError("trainer needs a corpus");
  cfg_.validate();
  model_ = std::make_unique<ToyLM>(cfg_, resolve_vocab(cfg_, *corpus_));
  opt_ = AdamW(model_->parameters(), {cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay});
  val_batches_ = fixed_batches(corpus_->val(), cfg_.eval_batches, cfg_.batch_size, cfg_.context_length);
  eval_at_ = eval_steps(cfg_.total_steps);
}

void Trainer::set_steps_done(std::int64_t s) {
  if (s < 0 || s > cfg_.total_steps) throw StateError("step counter outside the schedule");
  step_ = s;
}

double Trainer::evaluate() {
  NoGradGuard guard;
  double nll = 0.0;
  for (const auto& b : val_batches_)
    nll += model_->loss(b.inputs, b.targets, b.batch, b.seq).item();
  return std::exp(nll / static_cast<double>(val_batches_.size()));
}

const TelemetryRecord& Trainer::step() {
  if (finished()) throw StateError("training schedule already complete");
  const std::int64_t s = step_;
  set_current_step(s + 1);
  model_->set_sparsity_enabled(cfg_.sparse_at(s));

  const auto batch = sample_batch(corpus_->train(), cfg_.batch_size, cfg_.context_length, rng_);
  auto& params = model_->parameters();
  for (auto& p : params) p.value.zero_grad();
  const Tensor loss = model_->loss(batch.inputs, batch.targets, batch.batch, batch.seq);
  loss.backward();
  clip_grad_norm(params, cfg_.grad_clip);
  opt_.step(params, learning_rate(cfg_, s));

  TelemetryRecord r;
  r.step = s + 1;
  r.train_loss = loss.item();
  std::vector<MatrixView> views;
  std::size_t zeros = 0, entries = 0;
  double flip_sum = 0.0;
  bool all_flips = true;
  for (const auto& l : model_->linears()) {
    const auto f = l.last_flip_rate();
    r.layer_flip_rate.push_back(f);
    if (f) flip_sum += *f;
    else all_flips = false;
    const auto w = l.master().values();
    r.layer_near_zero_mass.push_back(near_zero_mass(w));
    views.push_back({w, l.d_out(), l.d_in()});
    const auto q = ternary_quantize(w, l.d_out(), l.d_in());
    zeros += static_cast<std::size_t>(std::count(q.values.begin(), q.values.end(), 0));
    entries += q.values.size();
  }
  if (all_flips && !model_->linears().empty())
    r.mean_flip_rate = flip_sum / static_cast<double>(model_->linears().size());
  r.near_zero_mass = near_zero_mass(views);
  r.zero_fraction = entries ? static_cast<double>(zeros) / static_cast<double>(entries) : 0.0;
  ++step_;
  if (std::binary_search(eval_at_.begin(), eval_at_.end(), step_)) r.val_ppl = evaluate();
  records_.push_back(std::move(r));
  return records_.back();
}

void Trainer::run() {
  while (!finished()) step();
}

// ---------------------------------------------------------------------------

std::string run_result_json(const RunResult& r) {
  nlohmann::ordered_json j;
  j["config_hash"] = r.config_hash;
  j["final_val_ppl"] = r.final_val_ppl;
  auto curve = nlohmann::ordered_json::array();
  for (const auto& [s, p] : r.ppl_curve) curve.push_back({s, p});
  j["ppl_curve"] = curve;
  j["telemetry_path"] = r.telemetry_path;
  return j.dump(2) + "\n";
}

RunResult run_schedule(const ToyLMConfig& cfg, std::shared_ptr<const Corpus> corpus,
                       const std::optional<std::filesystem::path>& out_dir) {
  Trainer trainer(cfg, std::move(corpus));
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_text_file(*out_dir / "config.txt", cfg.to_text());
  }
  trainer.run();
  RunResult r;
  r.config_hash = cfg.hash();
  for (const auto& rec : trainer.records())
    if (rec.val_ppl) r.ppl_curve.emplace_back(rec.step, *rec.val_ppl);
  if (r.ppl_curve.empty()) throw StateError("run finished without a validation point");
  r.final_val_ppl = r.ppl_curve.back().second;
  r.records = trainer.records();
  if (out_dir) {
    r.telemetry_path = (*out_dir / "telemetry.csv").string();
    write_text_file(*out_dir / "telemetry.csv", telemetry_csv(r.records));
    write_text_file(*out_dir / "layers.csv", layer_csv(r.records));
    save_checkpoint(*out_dir / "final.ckpt", trainer);
    write_text_file(*out_dir / "result.json", run_result_json(r));
  }
  return r;
}

std::vector<RunResult> run_many(const std::vector<ToyLMConfig>& configs,
                                std::shared_ptr<const Corpus> corpus, int jobs,
                                const std::vector<std::optional<std::filesystem::path>>& out_dirs) {
  if (!out_dirs.empty() && out_dirs.size() != configs.size())
    throw ConfigError("run_many: one output directory per config expected");
  std::vector<RunResult> results(configs.size());
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    std::optional<kernels::ThreadScope> single;
    if (workers > 1) single.emplace(1);
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        results[i] = run_schedule(configs[i], corpus, out_dirs.empty() ? std::nullopt : out_dirs[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = configs.size();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

// ---------------------------------------------------------------------------

std::string to_string(Family f) { return f == Family::BitNet ? "bitnet" : "float"; }

Family parse_family(const std::string& text) {
  if (text == "bitnet") return Family::BitNet;
  if (text == "float") return Family::Float;
  throw ConfigError("unknown family '" + text + "' (bitnet|float)");
}

namespace {

std::string pattern_tag(NMPattern p) {
  return std::to_string(p.n_keep) + "-" + std::to_string(p.group_size);
}

}  // namespace

std::vector<SweepRow> run_sweep(const ToyLMConfig& base, const std::vector<NMPattern>& patterns,
                                const std::vector<Family>& families,
                                const std::vector<std::uint64_t>& seeds,
                                std::shared_ptr<const Corpus> corpus, int jobs,
                                const std::optional<std::filesystem::path>& out_dir) {
  const NMPattern anchor{8, 8};
  if (std::find(patterns.begin(), patterns.end(), anchor) == patterns.end())
    throw ConfigError("sweep patterns must include the dense 8:8 anchor");
  if (families.empty() || seeds.empty()) throw ConfigError("sweep needs at least one family and seed");
  std::vector<ToyLMConfig> configs;
  std::vector<std::optional<std::filesystem::path>> dirs;
  std::vector<SweepRow> rows;
  for (auto f : families)
    for (const auto& p : patterns)
      for (auto seed : seeds) {
        ToyLMConfig c = base;
        c.weight_mode = f == Family::BitNet ? WeightMode::BitNetSparse : WeightMode::FloatSparse;
        c.pattern = p;
        c.seed = seed;
        c.validate();
        configs.push_back(c);
        if (out_dir)
          dirs.emplace_back(*out_dir / (to_string(f) + "_" + pattern_tag(p) + "_s" + std::to_string(seed)));
        rows.push_back({f, p, seed, 0.0, 0.0});
      }
  const auto results = run_many(configs, std::move(corpus), jobs, dirs);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].ppl = results[i].final_val_ppl;
  for (auto& r : rows) {
    const auto a = std::find_if(rows.begin(), rows.end(), [&](const SweepRow& o) {
      return o.family == r.family && o.seed == r.seed && o.pattern == anchor;
    });
    r.norm_ppl = r.ppl / a->ppl;
  }
  if (out_dir) write_text_file(*out_dir / "sweep.csv", sweep_csv(rows));
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "family,pattern,seed,ppl,norm_ppl\n";
  for (const auto& r : rows)
    os << to_string(r.family) << ',' << r.pattern.str() << ',' << r.seed << ',' << format_value(r.ppl)
       << ',' << format_value(r.norm_ppl) << '\n';
  return os.str();
}

std::vector<AblationRun> run_ablation(const ToyLMConfig& base, const std::vector<Variant>& variants,
                                      const std::vector<std::uint64_t>& seeds,
                                      std::shared_ptr<const Corpus> corpus, int jobs,
                                      const std::optional<std::filesystem::path>& out_dir) {
  if (variants.empty() || seeds.empty()) throw ConfigError("ablation needs at least one variant and seed");
  std::vector<ToyLMConfig> configs;
  std::vector<std::optional<std::filesystem::path>> dirs;
  std::vector<AblationRun> runs;
  for (auto v : variants)
    for (auto seed : seeds) {
      ToyLMConfig c = base;
      c.variant = v;
      c.seed = seed;
      c.validate();
      configs.push_back(c);
      if (out_dir) dirs.emplace_back(*out_dir / (to_string(v) + "_s" + std::to_string(seed)));
      runs.push_back({v, seed, {}});
    }
  auto results = run_many(configs, std::move(corpus), jobs, dirs);
  for (std::size_t i = 0; i < runs.size(); ++i) runs[i].result = std::move(results[i]);
  if (out_dir) {
    write_text_file(*out_dir / "ablation_ppl.csv", ablation_ppl_csv(runs));
    write_text_file(*out_dir / "ablation_flip.csv", ablation_flip_csv(runs));
  }
  return runs;
}

namespace {

std::string ablation_table(const std::vector<AblationRun>& runs, bool ppl) {
  std::ostringstream os;
  os << "step";
  for (const auto& r : runs) os << ',' << to_string(r.variant) << "_s" << r.seed;
  os << '\n';
  std::size_t n = 0;
  for (const auto& r : runs) n = std::max(n, r.result.records.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<std::int64_t> step;
    std::ostringstream row;
    bool any = false;
    for (const auto& r : runs) {
      std::optional<double> v;
      if (i < r.result.records.size()) {
        const auto& rec = r.result.records[i];
        step = rec.step;
        v = ppl ? rec.val_ppl : rec.mean_flip_rate;
      }
      any |= v.has_value();
      row << ',' << format_value(v);
    }
    if (ppl && !any) continue;
    os << *step << row.str() << '\n';
  }
  return os.str();
}

}  // namespace

std::string ablation_ppl_csv(const std::vector<AblationRun>& runs) { return ablation_table(runs, true); }
std::string ablation_flip_csv(const std::vector<AblationRun>& runs) { return ablation_table(runs, false); }

std::optional<double> mean_flip_rate(const std::vector<TelemetryRecord>& records, std::int64_t first,
                                     std::int64_t last) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.step >= first && r.step <= last && r.mean_flip_rate) {
      sum += *r.mean_flip_rate;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

}  // namespace sbn
