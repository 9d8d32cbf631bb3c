#pragma once

// Central finite-difference gradient check shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sbn/rng.hpp"
#include "sbn/tensor.hpp"

namespace sbn::test {

inline constexpr float kFdStep = 1e-3f;
inline constexpr double kFdRelTol = 1e-2;
// Components whose true value is near zero are compared absolutely; float
// rounding of the probe loss alone contributes ~1e-4 at this step size.
inline constexpr double kFdAbsFloor = 1e-3;

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCase {
  std::vector<Tensor> inputs;  // leaves; those with requires_grad are checked
  OpFn op;
};

struct GradReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst = 0.0;  // largest |a - n| / allowed
  std::string detail;
};

inline bool within_fd_tolerance(double analytic, double numeric) {
  const double err = std::fabs(analytic - numeric);
  return err <= kFdRelTol * std::max(std::fabs(analytic), std::fabs(numeric)) || err <= kFdAbsFloor;
}

// Probes L = sum(w * op(inputs)) with fixed random weights w.
inline GradReport gradcheck(GradCase c, Rng& rng) {
  GradReport rep;
  Tensor out = c.op(c.inputs);
  std::vector<float> w(out.size());
  for (auto& x : w) x = static_cast<float>(rng.normal());
  out.backward(w);

  auto probe = [&] {
    NoGradGuard ng;
    const Tensor y = c.op(c.inputs);
    double l = 0.0;
    auto yv = y.values();
    for (std::size_t i = 0; i < yv.size(); ++i) l += static_cast<double>(w[i]) * yv[i];
    return l;
  };

  for (std::size_t a = 0; a < c.inputs.size(); ++a) {
    Tensor& in = c.inputs[a];
    if (!in.requires_grad()) continue;
    const std::vector<float> g(in.grad().begin(), in.grad().end());
    auto vals = in.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const float x0 = vals[i];
      const float xp = x0 + kFdStep, xm = x0 - kFdStep;
      vals[i] = xp;
      const double lp = probe();
      vals[i] = xm;
      const double lm = probe();
      vals[i] = x0;
      const double numeric = (lp - lm) / (static_cast<double>(xp) - xm);
      const double analytic = g.empty() ? 0.0 : g[i];
      ++rep.checked;
      const double allowed =
          std::max(kFdRelTol * std::max(std::fabs(analytic), std::fabs(numeric)), kFdAbsFloor);
      rep.worst = std::max(rep.worst, std::fabs(analytic - numeric) / allowed);
      if (!within_fd_tolerance(analytic, numeric)) {
        if (rep.failed == 0)
          rep.detail = "input " + std::to_string(a) + " entry " + std::to_string(i) +
                       ": analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
        ++rep.failed;
      }
    }
  }
  return rep;
}

inline std::size_t dim_upto(Rng& rng, std::size_t hi) { return 1 + rng.below(hi); }

inline Tensor random_leaf(Shape shape, Rng& rng, bool requires_grad = true, double spread = 1.0,
                          double min_abs = 0.0) {
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) {
    do x = static_cast<float>(spread * rng.normal());
    while (std::fabs(x) < min_abs);
  }
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<std::int32_t> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::int32_t> ids(n);
  for (auto& t : ids) t = static_cast<std::int32_t>(rng.below(vocab));
  return ids;
}

struct NamedOp {
  std::string name;
  std::function<GradCase(Rng&)> make;
};

// Every differentiable op with a random small-case generator (dims <= 8).
inline std::vector<NamedOp> differentiable_ops() {
  std::vector<NamedOp> ops;
  ops.push_back({"matmul", [](Rng& r) {
                   const auto m = dim_upto(r, 8), k = dim_upto(r, 8), n = dim_upto(r, 8);
                   return GradCase{{random_leaf({m, k}, r), random_leaf({k, n}, r)},
                                   [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }};
                 }});
  ops.push_back({"matmul_nt", [](Rng& r) {
                   const auto m = dim_upto(r, 8), k = dim_upto(r, 8), n = dim_upto(r, 8);
                   return GradCase{{random_leaf({m, k}, r), random_leaf({n, k}, r)},
                                   [](const std::vector<Tensor>& in) { return matmul_nt(in[0], in[1]); }};
                 }});
  ops.push_back({"add", [](Rng& r) {
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   return GradCase{{random_leaf(s, r), random_leaf(s, r)},
                                   [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }};
                 }});
  ops.push_back({"mul", [](Rng& r) {
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   return GradCase{{random_leaf(s, r), random_leaf(s, r)},
                                   [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }};
                 }});
  ops.push_back({"scale", [](Rng& r) {
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   const float c = static_cast<float>(r.normal() * 2.0);
                   return GradCase{{random_leaf(s, r)},
                                   [c](const std::vector<Tensor>& in) { return scale(in[0], c); }};
                 }});
  ops.push_back({"relu", [](Rng& r) {
                   // Entries kept away from the kink so the probe never straddles it.
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   return GradCase{{random_leaf(s, r, true, 1.0, 0.01)},
                                   [](const std::vector<Tensor>& in) { return relu(in[0]); }};
                 }});
  ops.push_back({"silu", [](Rng& r) {
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   return GradCase{{random_leaf(s, r, true, 2.0)},
                                   [](const std::vector<Tensor>& in) { return silu(in[0]); }};
                 }});
  ops.push_back({"sum", [](Rng& r) {
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   return GradCase{{random_leaf(s, r)},
                                   [](const std::vector<Tensor>& in) { return sum(in[0]); }};
                 }});
  ops.push_back({"rmsnorm", [](Rng& r) {
                   // Rows with RMS near sqrt(eps) vary on the scale of the probe
                   // step itself; entries are kept at least 0.1 from zero.
                   const auto rows = dim_upto(r, 8), d = dim_upto(r, 8);
                   return GradCase{{random_leaf({rows, d}, r, true, 1.0, 0.1), random_leaf({d}, r)},
                                   [](const std::vector<Tensor>& in) { return rmsnorm(in[0], in[1]); }};
                 }});
  ops.push_back({"softmax", [](Rng& r) {
                   const Shape s{dim_upto(r, 8), dim_upto(r, 8)};
                   return GradCase{{random_leaf(s, r, true, 2.0)},
                                   [](const std::vector<Tensor>& in) { return softmax(in[0]); }};
                 }});
  ops.push_back({"embedding_gather", [](Rng& r) {
                   const auto vocab = dim_upto(r, 8), d = dim_upto(r, 8), n = dim_upto(r, 8);
                   auto ids = random_ids(n, vocab, r);
                   return GradCase{{random_leaf({vocab, d}, r)},
                                   [ids](const std::vector<Tensor>& in) { return embedding_gather(in[0], ids); }};
                 }});
  ops.push_back({"cross_entropy", [](Rng& r) {
                   const auto n = dim_upto(r, 8), vocab = dim_upto(r, 8);
                   auto targets = random_ids(n, vocab, r);
                   return GradCase{{random_leaf({n, vocab}, r, true, 2.0)},
                                   [targets](const std::vector<Tensor>& in) { return cross_entropy(in[0], targets); }};
                 }});
  ops.push_back({"causal_attention", [](Rng& r) {
                   const auto batch = dim_upto(r, 2), seq = dim_upto(r, 4), heads = dim_upto(r, 2),
                              hd = dim_upto(r, 4);
                   const Shape s{batch * seq, heads * hd};
                   return GradCase{{random_leaf(s, r), random_leaf(s, r), random_leaf(s, r)},
                                   [=](const std::vector<Tensor>& in) {
                                     return causal_attention(in[0], in[1], in[2], batch, seq, heads);
                                   }};
                 }});
  return ops;
}

}  // namespace sbn::test
