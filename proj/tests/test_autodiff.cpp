#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sbn/error.hpp"
#include "sbn/tensor.hpp"

using namespace sbn;

namespace {

std::vector<float> vec(std::span<const float> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("matmul examples") {
  const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto b = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(vec(matmul(eye, b).values()) == std::vector<float>{1, 2, 3, 4});
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0f);
  const auto z = matmul(Tensor::zeros({3, 2}), Tensor::from({2, 2}, {5, -6, 7, 8}));
  for (float v : z.values()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(matmul_nt(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ShapeError);
}

TEST_CASE("matmul backward is g b^T and a^T g") {
  auto a = Tensor::from({1, 2}, {1, 2}, true);
  auto b = Tensor::from({2, 1}, {3, 4}, true);
  matmul(a, b).backward();
  CHECK(vec(a.grad()) == std::vector<float>{3, 4});
  CHECK(vec(b.grad()) == std::vector<float>{1, 2});
}

TEST_CASE("elementwise examples") {
  const auto s = softmax(Tensor::from({1, 2}, {0, 0}));
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK(s.values()[1] == doctest::Approx(0.5));

  for (std::size_t v : {2u, 5u, 17u}) {
    const auto logits = Tensor::zeros({3, v});
    const std::vector<std::int32_t> targets{0, 1, 1};
    CHECK(cross_entropy(logits, targets).item() == doctest::Approx(std::log(double(v))).epsilon(1e-6));
  }

  const auto r = rmsnorm(Tensor::from({1, 4}, {2.5f, 2.5f, 2.5f, 2.5f}), Tensor::from({4}, {1, 1, 1, 1}));
  for (float v : r.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-5));

  CHECK(vec(relu(Tensor::from({3}, {-1, 0, 2})).values()) == std::vector<float>{0, 0, 2});
  CHECK(silu(Tensor::from({1}, {0})).item() == 0.0f);
  CHECK(vec(scale(Tensor::from({2}, {1, -2}), 3).values()) == std::vector<float>{3, -6});
  CHECK(sum(Tensor::from({3}, {1, 2, 3})).item() == 6.0f);

  const auto table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::vector<std::int32_t> ids{2, 0, 2};
  CHECK(vec(embedding_gather(table, ids).values()) == std::vector<float>{20, 21, 0, 1, 20, 21});
}

TEST_CASE("elementwise shape errors") {
  CHECK_THROWS_AS(add(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(mul(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0})), ShapeError);
  CHECK_THROWS_AS(rmsnorm(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  const std::vector<std::int32_t> bad{3};
  CHECK_THROWS_AS(embedding_gather(Tensor::zeros({3, 2}), bad), ShapeError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 3}), bad), ShapeError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(causal_attention(Tensor::zeros({4, 6}), Tensor::zeros({4, 6}), Tensor::zeros({4, 6}), 1, 4, 4),
                  ShapeError);
}

TEST_CASE("custom gradient boundary: round with identity backward") {
  auto x = Tensor::from({2}, {0.4f, 0.6f}, true);
  auto y = custom_grad(
      "round", {x}, {2},
      [](const std::vector<std::span<const float>>& in) {
        return std::vector<float>{std::round(in[0][0]), std::round(in[0][1])};
      },
      [](std::span<const float> g) { return std::vector<std::vector<float>>{{g.begin(), g.end()}}; });
  CHECK(vec(y.values()) == std::vector<float>{0, 1});
  const std::vector<float> up{1, 1};
  y.backward(up);
  CHECK(vec(x.grad()) == std::vector<float>{1, 1});
}

TEST_CASE("custom gradient boundary: clip passes in-range gradients") {
  auto x = Tensor::from({3}, {-0.5f, 0.25f, 0.9f}, true);
  auto y = custom_grad(
      "clip", {x}, {3},
      [](const std::vector<std::span<const float>>& in) {
        std::vector<float> o;
        for (float v : in[0]) o.push_back(std::clamp(v, -1.0f, 1.0f));
        return o;
      },
      [](std::span<const float> g) { return std::vector<std::vector<float>>{{g.begin(), g.end()}}; });
  const std::vector<float> up{0.3f, -2.0f, 7.0f};
  y.backward(up);
  CHECK(vec(x.grad()) == up);
}

TEST_CASE("custom gradient boundaries compose inner then outer") {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto ident = [](const std::vector<std::span<const float>>& in) {
    return std::vector<float>(in[0].begin(), in[0].end());
  };
  auto inner = custom_grad("inner", {x}, {2}, ident, [](std::span<const float> g) {
    return std::vector<std::vector<float>>{{g[0] + 1.0f, g[1] + 1.0f}};
  });
  auto outer = custom_grad("outer", {inner}, {2}, ident, [](std::span<const float> g) {
    return std::vector<std::vector<float>>{{g[0] * 10.0f, g[1] * 10.0f}};
  });
  const std::vector<float> up{1, 2};
  outer.backward(up);
  // Outer first: (10, 20); then inner adds one.
  CHECK(vec(x.grad()) == std::vector<float>{11, 21});
}

TEST_CASE("custom gradient boundary rejects wrong gradient shapes") {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = custom_grad(
      "bad", {x}, {2},
      [](const std::vector<std::span<const float>>& in) { return std::vector<float>(in[0].begin(), in[0].end()); },
      [](std::span<const float>) { return std::vector<std::vector<float>>{{1.0f}}; });
  const std::vector<float> up{1, 1};
  CHECK_THROWS_AS(y.backward(up), ShapeError);
  CHECK_THROWS_AS(custom_grad("bad_forward", {x}, {3}, std::vector<float>{1, 2}, {}), ShapeError);
}

TEST_CASE("central finite differences on every differentiable op") {
  for (const auto& op : test::differentiable_ops()) {
    SUBCASE(op.name.c_str()) {
      Rng rng(100);
      for (int trial = 0; trial < 50; ++trial) {
        const auto rep = test::gradcheck(op.make(rng), rng);
        INFO(op.name, " trial ", trial, " ", rep.detail);
        CHECK(rep.failed == 0);
      }
    }
  }
}

TEST_CASE("shared subexpressions accumulate gradients") {
  // f(a, b) = sum((a*b) * (a+b)) with u = a*b reused; checked scalar by scalar
  // against finite differences in double.
  Rng rng(3);
  auto a = test::random_leaf({3}, rng);
  auto b = test::random_leaf({3}, rng);
  auto u = mul(a, b);
  auto v = add(a, u);  // a used twice, u used twice
  auto f = sum(mul(u, v));
  f.backward();

  auto oracle = [](double x, double y) { return (x * y) * (x + x * y); };
  for (std::size_t i = 0; i < 3; ++i) {
    const double x = a.values()[i], y = b.values()[i], h = 1e-6;
    const double ga = (oracle(x + h, y) - oracle(x - h, y)) / (2 * h);
    const double gb = (oracle(x, y + h) - oracle(x, y - h)) / (2 * h);
    CHECK(a.grad()[i] == doctest::Approx(ga).epsilon(1e-4));
    CHECK(b.grad()[i] == doctest::Approx(gb).epsilon(1e-4));
  }
}

TEST_CASE("diamond graph visits each node once") {
  auto x = Tensor::from({1}, {2}, true);
  auto y = scale(x, 3);
  auto z = add(y, y);
  z.backward();
  CHECK(x.grad()[0] == 6.0f);
}

TEST_CASE("seeded forward and backward are bit-identical across runs") {
  auto run = [] {
    Rng rng(11);
    auto q = test::random_leaf({8, 8}, rng), k = test::random_leaf({8, 8}, rng),
         v = test::random_leaf({8, 8}, rng), g = test::random_leaf({8}, rng);
    auto h = rmsnorm(silu(causal_attention(q, k, v, 2, 4, 2)), g);
    const std::vector<std::int32_t> t{0, 1, 2, 3, 4, 5, 6, 7};
    auto loss = cross_entropy(softmax(h), t);
    loss.backward();
    std::vector<float> all = vec(loss.values());
    for (auto* p : {&q, &k, &v, &g}) all.insert(all.end(), p->grad().begin(), p->grad().end());
    return all;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite results raise NumericFault naming the op and step") {
  set_current_step(42);
  try {
    (void)scale(Tensor::from({1}, {3e38f}), 10.0f);
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    CHECK(e.op() == "scale");
    CHECK(e.step() == 42);
  }
  set_current_step(0);
}

TEST_CASE("no-grad guard records no graph") {
  auto x = Tensor::from({1}, {2}, true);
  Tensor y;
  {
    NoGradGuard ng;
    CHECK_FALSE(grad_enabled());
    y = scale(x, 2);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}
