#include "sbn/toy_lm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "sbn/error.hpp"
#include "sbn/hash.hpp"
#include "sbn/rng.hpp"

namespace sbn {

std::string to_string(WeightMode m) {
  switch (m) {
    case WeightMode::FloatDense: return "float_dense";
    case WeightMode::FloatSparse: return "float_sparse";
    case WeightMode::BitNetDense: return "bitnet_dense";
    case WeightMode::BitNetSparse: return "bitnet_sparse";
  }
  return "unknown";
}

WeightMode parse_weight_mode(const std::string& text) {
  for (auto m : {WeightMode::FloatDense, WeightMode::FloatSparse, WeightMode::BitNetDense,
                 WeightMode::BitNetSparse})
    if (to_string(m) == text) return m;
  throw ConfigError("unknown weight_mode '" + text + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  is >> out;
  if (is.fail() || !is.eof()) throw ConfigError("invalid value '" + value + "' for " + key);
  return out;
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  const auto v = parse_number<long long>(key, value);
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid boolean '" + value + "' for " + key);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void ToyLMConfig::set(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "vocab_size") vocab_size = parse_count(key, v);
  else if (key == "context_length") context_length = parse_count(key, v);
  else if (key == "d_model") d_model = parse_count(key, v);
  else if (key == "n_layers") n_layers = parse_count(key, v);
  else if (key == "n_heads") n_heads = parse_count(key, v);
  else if (key == "mlp_mult") mlp_mult = parse_count(key, v);
  else if (key == "tie_embeddings") tie_embeddings = parse_bool(key, v);
  else if (key == "init_std") init_std = parse_number<double>(key, v);
  else if (key == "weight_mode") weight_mode = parse_weight_mode(v);
  else if (key == "pattern") {
    try {
      pattern = NMPattern::parse(v);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("pattern: ") + e.what());
    }
  } else if (key == "variant") variant = parse_variant(v);
  else if (key == "ste") {
    if (v == "identity") ste = SteMode::Identity;
    else if (v == "clipped") ste = SteMode::Clipped;
    else throw ConfigError("invalid ste '" + v + "' (identity|clipped)");
  } else if (key == "sparse_ratio") sparse_ratio = parse_number<int>(key, v);
  else if (key == "lr") lr = parse_number<double>(key, v);
  else if (key == "min_lr_frac") min_lr_frac = parse_number<double>(key, v);
  else if (key == "warmup_frac") warmup_frac = parse_number<double>(key, v);
  else if (key == "beta1") beta1 = parse_number<double>(key, v);
  else if (key == "beta2") beta2 = parse_number<double>(key, v);
  else if (key == "adam_eps") adam_eps = parse_number<double>(key, v);
  else if (key == "weight_decay") weight_decay = parse_number<double>(key, v);
  else if (key == "grad_clip") grad_clip = parse_number<double>(key, v);
  else if (key == "total_steps") total_steps = parse_number<std::int64_t>(key, v);
  else if (key == "batch_size") batch_size = parse_count(key, v);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "eval_batches") eval_batches = parse_count(key, v);
  else if (key == "corpus_path") corpus_path = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

ToyLMConfig ToyLMConfig::parse(const std::string& text) { return parse(text, ToyLMConfig{}); }

ToyLMConfig ToyLMConfig::load(const std::filesystem::path& path) { return load(path, ToyLMConfig{}); }

ToyLMConfig ToyLMConfig::parse(const std::string& text, ToyLMConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

ToyLMConfig ToyLMConfig::load(const std::filesystem::path& path, ToyLMConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse(std::string(std::istreambuf_iterator<char>(in), {}), std::move(base));
}

std::string ToyLMConfig::to_text() const {
  std::ostringstream os;
  os << "vocab_size = " << vocab_size << '\n'
     << "context_length = " << context_length << '\n'
     << "d_model = " << d_model << '\n'
     << "n_layers = " << n_layers << '\n'
     << "n_heads = " << n_heads << '\n'
     << "mlp_mult = " << mlp_mult << '\n'
     << "tie_embeddings = " << (tie_embeddings ? "true" : "false") << '\n'
     << "init_std = " << fmt(init_std) << '\n'
     << "weight_mode = " << to_string(weight_mode) << '\n'
     << "pattern = " << pattern.str() << '\n'
     << "variant = " << to_string(variant) << '\n'
     << "ste = " << (ste == SteMode::Identity ? "identity" : "clipped") << '\n'
     << "sparse_ratio = " << sparse_ratio << '\n'
     << "lr = " << fmt(lr) << '\n'
     << "min_lr_frac = " << fmt(min_lr_frac) << '\n'
     << "warmup_frac = " << fmt(warmup_frac) << '\n'
     << "beta1 = " << fmt(beta1) << '\n'
     << "beta2 = " << fmt(beta2) << '\n'
     << "adam_eps = " << fmt(adam_eps) << '\n'
     << "weight_decay = " << fmt(weight_decay) << '\n'
     << "grad_clip = " << fmt(grad_clip) << '\n'
     << "total_steps = " << total_steps << '\n'
     << "batch_size = " << batch_size << '\n'
     << "seed = " << seed << '\n'
     << "eval_batches = " << eval_batches << '\n'
     << "corpus_path = " << corpus_path << '\n';
  return os.str();
}

std::string ToyLMConfig::hash() const {
  Fnv1a h;
  h.update(to_text());
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h.digest()));
  return buf;
}

void ToyLMConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || context_length == 0 || mlp_mult == 0)
    throw ConfigError("model dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  try {
    pattern.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("pattern: ") + e.what());
  }
  const auto m = static_cast<std::size_t>(pattern.group_size);
  if (d_model % m != 0 || (d_model * mlp_mult) % m != 0)
    throw ConfigError("layer input widths must be divisible by M = " + std::to_string(m));
  if (sparse_ratio != 0 && sparse_ratio != 25 && sparse_ratio != 50 && sparse_ratio != 75 &&
      sparse_ratio != 100)
    throw ConfigError("sparse_ratio must be one of 0, 25, 50, 75, 100");
  if (total_steps <= 0) throw ConfigError("total_steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_batches == 0) throw ConfigError("eval_batches must be positive");
  if (lr < 0.0 || !std::isfinite(lr)) throw ConfigError("lr must be finite and non-negative");
  if (min_lr_frac < 0.0 || min_lr_frac > 1.0) throw ConfigError("min_lr_frac must be in [0, 1]");
  if (warmup_frac < 0.0 || warmup_frac >= 1.0) throw ConfigError("warmup_frac must be in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("Adam betas must be in [0, 1)");
  if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative (0 disables)");
  if (init_std <= 0.0) throw ConfigError("init_std must be positive");
}

std::int64_t ToyLMConfig::sparse_start() const {
  // ceil((100 - rho) * T / 100) in integers.
  return ((100 - sparse_ratio) * total_steps + 99) / 100;
}

bool ToyLMConfig::sparse_at(std::int64_t step_index) const {
  return uses_sparsity(weight_mode) && step_index >= sparse_start();
}

// ---------------------------------------------------------------------------

namespace {

Tensor normal_param(Rng& rng, Shape shape, double std) {
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal() * std);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor ones_param(std::size_t n) { return Tensor::from({n}, std::vector<float>(n, 1.0f), true); }

}  // namespace

ToyLM::ToyLM(const ToyLMConfig& cfg, std::size_t vocab_size) : cfg_(cfg), vocab_(vocab_size) {
  cfg_.validate();
  if (vocab_ == 0) throw ConfigError("vocab_size must be positive");
  const std::size_t d = cfg_.d_model, h = d * cfg_.mlp_mult;
  Rng rng(cfg_.seed);
  LayerOptions opts;
  opts.pattern = cfg_.pattern;
  opts.variant = cfg_.variant;
  opts.precision = is_ternary(cfg_.weight_mode) ? Precision::Ternary : Precision::Float32;
  opts.sparsity_enabled = cfg_.sparse_at(0);
  opts.ste = cfg_.ste;

  tok_emb_ = normal_param(rng, {vocab_, d}, cfg_.init_std);
  pos_emb_ = normal_param(rng, {cfg_.context_length, d}, cfg_.init_std);
  params_.push_back({"tok_emb", tok_emb_, false});
  params_.push_back({"pos_emb", pos_emb_, false});
  linears_.reserve(6 * cfg_.n_layers);
  const char* names[6] = {"q", "k", "v", "o", "up", "down"};
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    gains_.push_back(ones_param(d));
    params_.push_back({p + "norm1", gains_.back(), false});
    for (int i = 0; i < 6; ++i) {
      if (i == 4) {
        gains_.push_back(ones_param(d));
        params_.push_back({p + "norm2", gains_.back(), false});
      }
      const Shape shape = i == 4 ? Shape{h, d} : (i == 5 ? Shape{d, h} : Shape{d, d});
      auto w = normal_param(rng, shape, cfg_.init_std);
      params_.push_back({p + names[i], w, true});
      linears_.emplace_back(w, opts);
    }
  }
  final_gain_ = ones_param(d);
  params_.push_back({"final_norm", final_gain_, false});
  if (cfg_.tie_embeddings) {
    head_ = tok_emb_;
  } else {
    head_ = normal_param(rng, {vocab_, d}, cfg_.init_std);
    params_.push_back({"head", head_, true});
  }
}

Tensor ToyLM::logits(std::span<const std::int32_t> inputs, std::size_t batch, std::size_t seq) {
  if (inputs.size() != batch * seq) throw ShapeError("logits: inputs are not batch * seq");
  if (seq > cfg_.context_length)
    throw ShapeError("sequence length " + std::to_string(seq) + " exceeds the context length");
  for (auto id : inputs)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_)
      throw ShapeError("token id " + std::to_string(id) + " outside the vocabulary");
  std::vector<std::int32_t> pos(batch * seq);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % seq);

  Tensor x = add(embedding_gather(tok_emb_, inputs), embedding_gather(pos_emb_, pos));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    auto* lin = &linears_[6 * l];
    const Tensor hn = rmsnorm(x, gains_[2 * l]);
    const Tensor att = causal_attention(lin[0].forward(hn), lin[1].forward(hn), lin[2].forward(hn),
                                        batch, seq, cfg_.n_heads);
    x = add(x, lin[3].forward(att));
    const Tensor hn2 = rmsnorm(x, gains_[2 * l + 1]);
    x = add(x, lin[5].forward(silu(lin[4].forward(hn2))));
  }
  return matmul_nt(rmsnorm(x, final_gain_), head_);
}

Tensor ToyLM::loss(std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                   std::size_t batch, std::size_t seq) {
  return cross_entropy(logits(inputs, batch, seq), targets);
}

void ToyLM::set_sparsity_enabled(bool enabled) {
  for (auto& l : linears_) l.set_sparsity_enabled(enabled && uses_sparsity(cfg_.weight_mode));
}

std::size_t ToyLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ToyLM::expected_parameter_count(const ToyLMConfig& cfg, std::size_t vocab_size) {
  const std::size_t d = cfg.d_model, h = d * cfg.mlp_mult;
  const std::size_t per_block = 4 * d * d + 2 * d * h + 2 * d;
  return vocab_size * d + cfg.context_length * d + cfg.n_layers * per_block + d +
         (cfg.tie_embeddings ? 0 : vocab_size * d);
}

}  // namespace sbn
