#include <cmath>
#include <vector>

#include "doctest.h"
#include "sbn/error.hpp"
#include "sbn/sparse_bitlinear.hpp"
#include "sbn/rng.hpp"

using namespace sbn;

namespace {

Tensor random_tensor(Shape s, Rng& rng, bool grad = false) {
  std::vector<float> v(shape_size(s));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor::from(std::move(s), std::move(v), grad);
}

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

SparseBitLinear make_layer(const Tensor& master, NMPattern p, Variant v = Variant::QuantThenMaskDenseGrad,
                           bool sparse = true) {
  LayerOptions o;
  o.pattern = p;
  o.variant = v;
  o.sparsity_enabled = sparse;
  return SparseBitLinear(Tensor::from(master.shape(), {master.values().begin(), master.values().end()}, true), o);
}

std::vector<float> vec(std::span<const float> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("composed example: quantize, mask, apply") {
  const auto master = Tensor::from({2, 4}, {0.6f, -0.6f, 0.2f, -0.2f, 0.9f, 0.05f, -0.45f, 0.0f}, true);
  auto layer = make_layer(master, {2, 4});
  const auto eff = layer.effective_weights();
  CHECK(eff.mask.bits == std::vector<std::uint8_t>{1, 1, 0, 0, 1, 0, 1, 0});
  CHECK(eff.weights.values == std::vector<std::int8_t>{1, -1, 0, 0, 1, 0, -1, 0});
  CHECK(eff.weights.gamma == doctest::Approx(0.375));
}

TEST_CASE("all-ones mask reduces to plain BitLinear") {
  Rng rng(1);
  const auto master = random_tensor({4, 4}, rng);
  auto sparse_dense = make_layer(master, {4, 4});
  auto disabled = make_layer(master, {2, 4}, Variant::QuantThenMaskDenseGrad, false);
  const auto x = Tensor::from({1, 4}, {1, 0, 0, 0});
  CHECK(vec(sparse_dense.forward(x).values()) == vec(disabled.forward(x).values()));
  const auto x2 = random_tensor({5, 4}, rng);
  const auto g = random_vec(20, rng);
  CHECK(vec(sparse_dense.forward(x2).values()) == vec(disabled.forward(x2).values()));
  const auto a = sparse_dense.backward(g), b = disabled.backward(g);
  CHECK(a.grad_master == b.grad_master);
  CHECK(a.grad_input == b.grad_input);
}

TEST_CASE("integer path matches the dequantized float path") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto master = random_tensor({16, 32}, rng);
    auto layer = make_layer(master, {6, 8});
    const auto x = random_tensor({7, 32}, rng);
    const auto y = layer.forward(x);
    const auto eff = layer.effective_weights();
    const auto xq = dequantize(activation_quantize(x));
    const auto wq = dequantize(eff.weights);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t o = 0; o < 16; ++o) {
        double ref = 0.0;
        for (std::size_t j = 0; j < 32; ++j) ref += double(xq.values()[i * 32 + j]) * wq.values()[o * 32 + j];
        CHECK(y.values()[i * 16 + o] == doctest::Approx(ref).epsilon(1e-4).scale(1e-3));
      }
  }
}

TEST_CASE("default variant: effective weights are valid N:M and zero where masked") {
  Rng rng(3);
  for (auto p : {NMPattern{6, 8}, NMPattern{2, 4}, NMPattern{1, 8}}) {
    for (int trial = 0; trial < 30; ++trial) {
      auto layer = make_layer(random_tensor({8, 16}, rng), p);
      const auto eff = layer.effective_weights();
      CHECK(validate_mask(eff.mask));
      for (std::size_t i = 0; i < eff.mask.bits.size(); ++i)
        if (!eff.mask.bits[i]) CHECK(eff.weights.values[i] == 0);
    }
  }
}

TEST_CASE("dual STE: mask contributes nothing to the backward pass") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto master = random_tensor({8, 16}, rng);
    auto sparse = make_layer(master, {6, 8});
    auto plain = make_layer(master, {6, 8}, Variant::QuantThenMaskDenseGrad, false);
    const auto eff = sparse.effective_weights();
    const auto x = random_tensor({5, 16}, rng);
    const auto g = random_vec(5 * 8, rng);
    (void)sparse.forward(x);
    (void)plain.forward_with(x, eff);
    const auto a = sparse.backward(g), b = plain.backward(g);
    CHECK(a.grad_master == b.grad_master);
    CHECK(a.grad_input == b.grad_input);
    // Masked positions still receive gradient.
    std::size_t masked_nonzero = 0;
    for (std::size_t i = 0; i < eff.mask.bits.size(); ++i)
      if (!eff.mask.bits[i] && a.grad_master[i] != 0.0f) ++masked_nonzero;
    CHECK(masked_nonzero > 0);
  }
}

TEST_CASE("autodiff graph and explicit backward agree") {
  Rng rng(5);
  const auto master = random_tensor({8, 16}, rng);
  auto layer = make_layer(master, {6, 8});
  auto x = random_tensor({3, 16}, rng, true);
  const auto g = random_vec(24, rng);
  layer.forward(x).backward(g);
  const auto r = layer.backward(g);
  CHECK(vec(layer.master().grad()) == r.grad_master);
  CHECK(vec(x.grad()) == r.grad_input);
}

TEST_CASE("mask without grad gates the master gradient exactly") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto master = random_tensor({8, 16}, rng);
    auto dflt = make_layer(master, {2, 4});
    auto gated = make_layer(master, {2, 4}, Variant::MaskWithoutGrad);
    const auto x = random_tensor({4, 16}, rng);
    const auto g = random_vec(32, rng);
    CHECK(vec(dflt.forward(x).values()) == vec(gated.forward(x).values()));
    const auto a = dflt.backward(g), b = gated.backward(g);
    const auto mask = dflt.last_mask()->bits;
    for (std::size_t i = 0; i < mask.size(); ++i)
      CHECK(b.grad_master[i] == (mask[i] ? a.grad_master[i] : 0.0f));
    CHECK(a.grad_input == b.grad_input);
  }
}

TEST_CASE("single neuron gradient by hand") {
  const auto master = Tensor::from({1, 4}, {0.3f, -0.1f, 0.7f, 0.05f}, true);
  auto layer = make_layer(master, {2, 4});
  const auto x = Tensor::from({1, 4}, {1.0f, 0.5f, -0.25f, 2.0f});
  (void)layer.forward(x);
  const std::vector<float> g{0.5f};
  const auto r = layer.backward(g);
  // x quantized with scale 127 / (2 + eps): ints 63, 32, -16, 127.
  const float s = 127.0f / (2.0f + kQuantEps);
  const float q[4] = {63, 32, -16, 127};
  for (int j = 0; j < 4; ++j) CHECK(r.grad_master[j] == doctest::Approx(0.5f * q[j] / s).epsilon(1e-6));
  // gamma = 0.2875; W_q = [1, 0, 1, 0]; mask keeps {0, 2}.
  const float gamma = 0.2875f;
  CHECK(r.grad_input[0] == doctest::Approx(0.5f * gamma).epsilon(1e-6));
  CHECK(r.grad_input[1] == 0.0f);
  CHECK(r.grad_input[2] == doctest::Approx(0.5f * gamma).epsilon(1e-6));
  CHECK(r.grad_input[3] == 0.0f);
}

TEST_CASE("mask from quantized ignores perturbations that keep the ternary values") {
  Rng rng(7);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto master = random_tensor({4, 16}, rng);
    auto a = make_layer(master, {2, 4}, Variant::MaskFromQuantized);
    const auto before = a.effective_weights();
    std::vector<float> w = vec(master.values());
    const std::size_t i = rng.below(w.size());
    w[i] *= static_cast<float>(1.0 + 0.05 * rng.normal());
    auto b = make_layer(Tensor::from({4, 16}, w), {2, 4}, Variant::MaskFromQuantized);
    if (ternary_quantize(w, 4, 16).values != ternary_quantize(master).values) continue;
    ++checked;
    CHECK(b.current_mask() == a.current_mask());
    CHECK(b.current_mask() == before.mask);
  }
  CHECK(checked > 100);
}

TEST_CASE("sparse-before-quant computes gamma on the masked matrix") {
  Rng rng(8);
  const auto master = random_tensor({8, 16}, rng);
  auto dflt = make_layer(master, {2, 4});
  auto sbq = make_layer(master, {2, 4}, Variant::SparseBeforeQuant);
  const auto e1 = dflt.effective_weights(), e2 = sbq.effective_weights();
  CHECK(e1.weights.gamma != e2.weights.gamma);
  std::vector<float> masked = vec(master.values());
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (!e2.mask.bits[i]) masked[i] = 0.0f;
  CHECK(e2.weights.gamma == absmean_scale(masked));

  auto dense_a = make_layer(master, {4, 4});
  auto dense_b = make_layer(master, {4, 4}, Variant::SparseBeforeQuant);
  CHECK(dense_a.effective_weights().weights == dense_b.effective_weights().weights);
}

TEST_CASE("float precision applies the mask to the float master") {
  Rng rng(9);
  const auto master = random_tensor({4, 8}, rng);
  LayerOptions o;
  o.pattern = {2, 4};
  o.precision = Precision::Float32;
  SparseBitLinear layer(Tensor::from({4, 8}, vec(master.values()), true), o);
  const auto x = random_tensor({3, 8}, rng);
  const auto y = layer.forward(x);
  const auto mask = generate_mask(master, {2, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t o2 = 0; o2 < 4; ++o2) {
      double ref = 0.0;
      for (std::size_t j = 0; j < 8; ++j)
        if (mask.bits[o2 * 8 + j]) ref += double(x.values()[i * 8 + j]) * master.values()[o2 * 8 + j];
      CHECK(y.values()[i * 4 + o2] == doctest::Approx(ref).epsilon(1e-5));
    }
  CHECK_THROWS_AS(layer.effective_weights(), StateError);
}

TEST_CASE("layer state errors and telemetry") {
  Rng rng(10);
  const auto master = random_tensor({4, 8}, rng);
  auto layer = make_layer(master, {2, 4});
  CHECK_THROWS_AS(layer.backward(std::vector<float>(4, 0.0f)), StateError);
  CHECK_NOTHROW(layer.set_variant(Variant::MaskWithoutGrad));
  const auto x = random_tensor({1, 8}, rng);
  (void)layer.forward(x);
  CHECK_FALSE(layer.last_flip_rate().has_value());
  CHECK_THROWS_AS(layer.set_variant(Variant::QuantThenMaskDenseGrad), ConfigError);
  CHECK_THROWS_AS(layer.forward(random_tensor({1, 4}, rng)), ShapeError);
  CHECK_THROWS_AS(make_layer(random_tensor({4, 6}, rng), {2, 4}), PatternError);

  layer.set_sparsity_enabled(false);
  (void)layer.forward(x);
  (void)layer.forward(x);
  REQUIRE(layer.last_flip_rate().has_value());
  CHECK(*layer.last_flip_rate() == 0.0);

  {
    NoGradGuard ng;
    const auto n = layer.training_forwards();
    (void)layer.forward(x);
    CHECK(layer.training_forwards() == n);
  }
}

TEST_CASE("variant names round-trip") {
  for (auto v : {Variant::QuantThenMaskDenseGrad, Variant::MaskWithoutGrad, Variant::MaskFromQuantized,
                 Variant::SparseBeforeQuant})
    CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("mask_then_nothing"), ConfigError);
}
