#include "sbn/checkpoint.hpp"

#include "sbn/binary_io.hpp"
#include "sbn/error.hpp"

namespace sbn {

namespace {

constexpr char kMagic[8] = {'S', 'B', 'N', 'C', 'K', 'P', 'T', '1'};

struct ParamState {
  std::string name;
  Shape shape;
  std::vector<float> values, m, v;
};

struct LayerState {
  std::int64_t forwards = 0;
  bool sparsity_enabled = false;
  std::optional<NMMask> mask;
};

struct Decoded {
  ToyLMConfig cfg;
  std::uint64_t vocab = 0;
  std::int64_t step = 0;
  std::string rng;
  std::int64_t adam_steps = 0;
  std::vector<ParamState> params;
  std::vector<LayerState> layers;
  std::vector<TelemetryRecord> records;
};

void put_opt(ByteWriter& w, const std::optional<double>& v) {
  w.u8(v ? 1 : 0);
  w.f64(v.value_or(0.0));
}

std::optional<double> get_opt(ByteReader& r) {
  const auto flag = r.u8();
  const double v = r.f64();
  if (flag > 1) throw FormatError("corrupt optional flag");
  return flag ? std::optional<double>(v) : std::nullopt;
}

void put_opts(ByteWriter& w, const std::vector<std::optional<double>>& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  for (const auto& x : v) put_opt(w, x);
}

std::vector<std::optional<double>> get_opts(ByteReader& r) {
  const auto n = r.u32();
  if (n > r.remaining() / 9) throw FormatError("truncated file");
  std::vector<std::optional<double>> v(n);
  for (auto& x : v) x = get_opt(r);
  return v;
}

Decoded decode(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 8 || r.raw(8) != std::string(kMagic, 8))
    throw FormatError("not a checkpoint file (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Decoded d;
  d.cfg = ToyLMConfig::parse(r.str());
  d.vocab = r.u64();
  d.step = r.i64();
  d.rng = r.str();
  d.adam_steps = r.i64();
  const auto np = r.u32();
  for (std::uint32_t i = 0; i < np; ++i) {
    ParamState p;
    p.name = r.str();
    const auto nd = r.u32();
    if (nd > 8) throw FormatError("corrupt tensor rank");
    for (std::uint32_t k = 0; k < nd; ++k) p.shape.push_back(static_cast<std::size_t>(r.u64()));
    p.values = r.f32s();
    p.m = r.f32s();
    p.v = r.f32s();
    if (p.values.size() != shape_size(p.shape) || p.m.size() != p.values.size() || p.v.size() != p.values.size())
      throw FormatError("parameter " + p.name + " has inconsistent sizes");
    d.params.push_back(std::move(p));
  }
  const auto nl = r.u32();
  for (std::uint32_t i = 0; i < nl; ++i) {
    LayerState l;
    l.forwards = r.i64();
    l.sparsity_enabled = r.u8() != 0;
    if (r.u8()) {
      NMMask m;
      m.rows = static_cast<std::size_t>(r.u64());
      m.cols = static_cast<std::size_t>(r.u64());
      m.pattern.n_keep = r.u16();
      m.pattern.group_size = r.u16();
      const auto n = r.u64();
      if (n != static_cast<std::uint64_t>(m.rows) * m.cols) throw FormatError("corrupt mask size");
      const auto b = r.bytes(static_cast<std::size_t>(n));
      m.bits.assign(b.begin(), b.end());
      l.mask = std::move(m);
    }
    d.layers.push_back(std::move(l));
  }
  const auto nr = r.u64();
  if (nr > r.remaining()) throw FormatError("truncated file");
  for (std::uint64_t i = 0; i < nr; ++i) {
    TelemetryRecord rec;
    rec.step = r.i64();
    rec.train_loss = r.f64();
    rec.val_ppl = get_opt(r);
    rec.mean_flip_rate = get_opt(r);
    rec.near_zero_mass = get_opt(r);
    rec.zero_fraction = get_opt(r);
    rec.layer_flip_rate = get_opts(r);
    rec.layer_near_zero_mass = get_opts(r);
    d.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint");
  return d;
}

void apply_model_state(const Decoded& d, ToyLM& model) {
  auto& params = model.parameters();
  if (params.size() != d.params.size()) throw FormatError("checkpoint parameter count differs from model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = d.params[i];
    auto& dst = params[i];
    if (src.name != dst.name || src.shape != dst.value.shape())
      throw FormatError("checkpoint parameter " + src.name + " does not match model parameter " + dst.name);
    auto w = dst.value.mutable_values();
    std::copy(src.values.begin(), src.values.end(), w.begin());
  }
  auto& layers = model.linears();
  if (layers.size() != d.layers.size()) throw FormatError("checkpoint layer count differs from model");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].set_sparsity_enabled(d.layers[i].sparsity_enabled);
    layers[i].restore_telemetry(d.layers[i].mask, d.layers[i].forwards);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Trainer& trainer) {
  ByteWriter w;
  w.raw(std::string_view(kMagic, 8));
  w.u32(kCheckpointVersion);
  w.str(trainer.config().to_text());
  w.u64(trainer.model().vocab_size());
  w.i64(trainer.steps_done());
  w.str(trainer.rng().state());
  const auto& opt = trainer.optimizer();
  w.i64(opt.steps());
  const auto& params = trainer.model().parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.shape().size()));
    for (auto s : p.value.shape()) w.u64(s);
    w.f32s(p.value.values());
    w.f32s(opt.first_moments()[i]);
    w.f32s(opt.second_moments()[i]);
  }
  const auto& layers = trainer.model().linears();
  w.u32(static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    w.i64(l.training_forwards());
    w.u8(l.sparsity_enabled() ? 1 : 0);
    const auto& m = l.last_mask();
    w.u8(m ? 1 : 0);
    if (m) {
      w.u64(m->rows);
      w.u64(m->cols);
      w.u16(static_cast<std::uint16_t>(m->pattern.n_keep));
      w.u16(static_cast<std::uint16_t>(m->pattern.group_size));
      w.u64(m->bits.size());
      w.bytes(m->bits);
    }
  }
  const auto& recs = trainer.records();
  w.u64(recs.size());
  for (const auto& r : recs) {
    w.i64(r.step);
    w.f64(r.train_loss);
    put_opt(w, r.val_ppl);
    put_opt(w, r.mean_flip_rate);
    put_opt(w, r.near_zero_mass);
    put_opt(w, r.zero_fraction);
    put_opts(w, r.layer_flip_rate);
    put_opts(w, r.layer_near_zero_mass);
  }
  return w.take();
}

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer) {
  write_file_bytes(path, encode_checkpoint(trainer));
}

void restore_checkpoint(std::span<const std::uint8_t> bytes, Trainer& trainer) {
  const auto d = decode(bytes);
  if (!(d.cfg == trainer.config()))
    throw ConfigError("checkpoint config " + d.cfg.hash() + " differs from trainer config " +
                      trainer.config().hash());
  if (d.vocab != trainer.model().vocab_size()) throw ConfigError("checkpoint vocabulary differs");
  apply_model_state(d, trainer.model());
  auto& opt = trainer.optimizer();
  for (std::size_t i = 0; i < d.params.size(); ++i) {
    opt.first_moments()[i] = d.params[i].m;
    opt.second_moments()[i] = d.params[i].v;
  }
  opt.set_steps(d.adam_steps);
  trainer.rng().set_state(d.rng);
  trainer.set_steps_done(d.step);
  trainer.records() = d.records;
}

void load_checkpoint(const std::filesystem::path& path, Trainer& trainer) {
  restore_checkpoint(read_file_bytes(path), trainer);
}

ToyLMConfig checkpoint_config(const std::filesystem::path& path) {
  return decode(read_file_bytes(path)).cfg;
}

std::unique_ptr<ToyLM> load_model(const std::filesystem::path& path) {
  const auto d = decode(read_file_bytes(path));
  auto model = std::make_unique<ToyLM>(d.cfg, static_cast<std::size_t>(d.vocab));
  apply_model_state(d, *model);
  return model;
}

std::vector<PackedNMWeights> export_packed(const ToyLM& model) {
  if (!is_ternary(model.config().weight_mode))
    throw ConfigError("export needs a ternary model, got " + to_string(model.config().weight_mode));
  std::vector<PackedNMWeights> out;
  for (const auto& l : model.linears()) out.push_back(pack(l.effective_weights()));
  return out;
}

}  // namespace sbn
