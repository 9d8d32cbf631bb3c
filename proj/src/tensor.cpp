#include "sbn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "sbn/error.hpp"
#include "sbn/kernels.hpp"
#include "fast_exp.hpp"

namespace sbn {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::int64_t t_step = 0;

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

void accumulate(detail::Node& n, std::span<const float> g) {
  if (!n.requires_grad) return;
  auto& buf = n.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<float>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), 0.0f);
  return grad;
}

NoGradGuard::NoGradGuard() : saved_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = saved_; }
bool grad_enabled() { return t_grad_enabled; }

void set_current_step(std::int64_t step) { t_step = step; }
std::int64_t current_step() { return t_step; }

void check_finite(const std::string& op, std::span<const float> values) {
  // Inf and NaN are exactly the magnitudes whose bit pattern is at least that
  // of Inf; an unsigned max reduction vectorises.
  std::uint32_t top = 0;
  for (float v : values) top = std::max(top, std::bit_cast<std::uint32_t>(v) & 0x7fffffffu);
  if (top >= 0x7f800000u) throw NumericFault(op, t_step);
}

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return from(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_size(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float v, bool requires_grad) { return from({1}, {v}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }
std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }
std::size_t Tensor::rows() const { return node_->shape.at(0); }
std::size_t Tensor::cols() const { return node_->shape.at(1); }
const std::string& Tensor::op() const { return node_->op; }
std::span<const float> Tensor::values() const { return node_->values; }
std::span<float> Tensor::mutable_values() { return node_->values; }

float Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }
std::span<float> Tensor::mutable_grad() { return node_->grad_buffer(); }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->values, false); }

Tensor Tensor::make(std::string op, Shape shape, std::vector<float> values,
                    std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward) {
  check_finite(op, values);
  auto node = std::make_shared<detail::Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->values = std::move(values);
  const bool track = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                       return t.requires_grad();
                     });
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  if (size() != 1) throw ShapeError("backward: implicit seed needs a single-element tensor");
  const float one = 1.0f;
  backward(std::span<const float>(&one, 1));
}

void Tensor::backward(std::span<const float> seed) const {
  if (seed.size() != size()) throw ShapeError("backward: seed size mismatch");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order; each node once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  accumulate(*node_, seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

// ---------------------------------------------------------------------------

Tensor custom_grad(std::string op, std::vector<Tensor> inputs, Shape out_shape,
                   std::vector<float> forward_values, CustomBackward backward_fn) {
  if (shape_size(out_shape) != forward_values.size())
    throw ShapeError(op + ": forward produced " + std::to_string(forward_values.size()) +
                     " values for shape " + shape_str(out_shape));
  const std::string name = op;
  auto bw = [backward_fn = std::move(backward_fn), name](detail::Node& self) {
    auto grads = backward_fn(self.grad);
    if (grads.size() != self.inputs.size())
      throw ShapeError(name + ": backward returned " + std::to_string(grads.size()) +
                       " gradients for " + std::to_string(self.inputs.size()) + " inputs");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].empty()) continue;
      auto& in = *self.inputs[i];
      if (grads[i].size() != in.values.size())
        throw ShapeError(name + ": backward gradient " + std::to_string(i) + " has " +
                         std::to_string(grads[i].size()) + " entries, input has " +
                         std::to_string(in.values.size()));
      accumulate(in, grads[i]);
    }
  };
  return Tensor::make(std::move(op), std::move(out_shape), std::move(forward_values),
                      std::move(inputs), std::move(bw));
}

Tensor custom_grad(std::string op, std::vector<Tensor> inputs, Shape out_shape,
                   const CustomForward& forward_fn, CustomBackward backward_fn) {
  std::vector<std::span<const float>> views;
  views.reserve(inputs.size());
  for (const auto& t : inputs) views.push_back(t.values());
  auto values = forward_fn(views);
  return custom_grad(std::move(op), std::move(inputs), std::move(out_shape), std::move(values),
                     std::move(backward_fn));
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<float> out(m * n);
  kernels::gemm_nn(a.values(), b.values(), out, m, k, n);
  return Tensor::make("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      std::vector<float> ga(m * k);
      kernels::gemm_nt(self.grad, nb.values, ga, m, n, k);  // g * b^T
      accumulate(na, ga);
    }
    if (nb.requires_grad) {
      std::vector<float> gb(k * n);
      kernels::gemm_tn(na.values, self.grad, gb, k, m, n);  // a^T * g
      accumulate(nb, gb);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  std::vector<float> out(m * n);
  kernels::gemm_nt(a.values(), b.values(), out, m, k, n);
  return Tensor::make("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      std::vector<float> ga(m * k);
      kernels::gemm_nn(self.grad, nb.values, ga, m, n, k);  // g * b
      accumulate(na, ga);
    }
    if (nb.requires_grad) {
      std::vector<float> gb(n * k);
      kernels::gemm_tn(self.grad, na.values, gb, n, m, k);  // g^T * a
      accumulate(nb, gb);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::make("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const auto n = self.grad.size();
    std::vector<float> g(n);
    if (na.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * nb.values[i];
      accumulate(na, g);
    }
    if (nb.requires_grad) {
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * na.values[i];
      accumulate(nb, g);
    }
  });
}

Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= c;
  return Tensor::make("scale", a.shape(), std::move(out), {a}, [c](detail::Node& self) {
    std::vector<float> g(self.grad);
    for (auto& v : g) v *= c;
    accumulate(*self.inputs[0], g);
  });
}

Tensor relu(const Tensor& a) {
  std::vector<float> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::max(v, 0.0f);
  return Tensor::make("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    std::vector<float> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = in.values[i] > 0.0f ? self.grad[i] : 0.0f;
    accumulate(in, g);
  });
}

Tensor silu(const Tensor& a) {
  std::vector<float> out(a.size());
  auto av = a.values();
  std::vector<float> sig(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    sig[i] = 1.0f / (1.0f + detail::fast_exp(-av[i]));
    out[i] = av[i] * sig[i];
  }
  return Tensor::make("silu", a.shape(), std::move(out), {a}, [sig = std::move(sig)](detail::Node& self) {
    auto& in = *self.inputs[0];
    std::vector<float> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float x = in.values[i];
      const float s = sig[i];
      g[i] = self.grad[i] * s * (1.0f + x * (1.0f - s));
    }
    accumulate(in, g);
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  return Tensor::make("sum", {1}, {static_cast<float>(acc)}, {a}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    std::vector<float> g(in.values.size(), self.grad[0]);
    accumulate(in, g);
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps) {
  require_2d(x, "rmsnorm");
  const std::size_t rows = x.rows(), d = x.cols();
  if (gain.size() != d)
    throw ShapeError("rmsnorm: gain has " + std::to_string(gain.size()) + " entries, rows have " +
                     std::to_string(d));
  if (d == 0) throw ShapeError("rmsnorm: empty rows");
  std::vector<float> out(rows * d);
  std::vector<float> inv_rms(rows);
  auto xv = x.values(), gv = gain.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += double(xv[r * d + j]) * xv[r * d + j];
    const float inv = static_cast<float>(1.0 / std::sqrt(ss / double(d) + eps));
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * inv * gv[j];
  }
  return Tensor::make(
      "rmsnorm", x.shape(), std::move(out), {x, gain},
      [rows, d, inv_rms = std::move(inv_rms)](detail::Node& self) {
        auto& nx = *self.inputs[0];
        auto& ng = *self.inputs[1];
        std::vector<float> gx(rows * d), gg(d, 0.0f);
        for (std::size_t r = 0; r < rows; ++r) {
          const float inv = inv_rms[r];
          const float* xr = nx.values.data() + r * d;
          const float* gr = self.grad.data() + r * d;
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const float n = xr[j] * inv;
            const float dn = gr[j] * ng.values[j];
            gg[j] += gr[j] * n;
            dot += double(dn) * n;
          }
          const float mean_dot = static_cast<float>(dot / double(d));
          for (std::size_t j = 0; j < d; ++j) {
            const float n = xr[j] * inv;
            const float dn = gr[j] * ng.values[j];
            gx[r * d + j] = inv * (dn - n * mean_dot);
          }
        }
        accumulate(nx, gx);
        accumulate(ng, gg);
      });
}

Tensor softmax(const Tensor& x) {
  require_2d(x, "softmax");
  const std::size_t rows = x.rows(), d = x.cols();
  if (d == 0) throw ShapeError("softmax: empty axis");
  std::vector<float> out(rows * d);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = xv.data() + r * d;
    float* yr = out.data() + r * d;
    const float mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) yr[j] = detail::fast_exp(xr[j] - mx);
    for (std::size_t j = 0; j < d; ++j) z += yr[j];
    for (std::size_t j = 0; j < d; ++j) yr[j] = static_cast<float>(yr[j] / z);
  }
  return Tensor::make("softmax", x.shape(), out, {x}, [rows, d, y = out](detail::Node& self) {
    std::vector<float> g(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += double(self.grad[r * d + j]) * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        g[r * d + j] = y[r * d + j] * (self.grad[r * d + j] - static_cast<float>(dot));
    }
    accumulate(*self.inputs[0], g);
  });
}

Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids) {
  require_2d(table, "embedding_gather");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<float> out(ids.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw ShapeError("embedding_gather: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return Tensor::make("embedding_gather", {ids.size(), d}, std::move(out), {table},
                      [d, saved = std::move(saved)](detail::Node& self) {
                        auto& nt = *self.inputs[0];
                        auto& buf = nt.grad_buffer();
                        for (std::size_t i = 0; i < saved.size(); ++i) {
                          float* dst = buf.data() + static_cast<std::size_t>(saved[i]) * d;
                          const float* src = self.grad.data() + i * d;
                          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                        }
                      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  if (n == 0 || vocab == 0) throw ShapeError("cross_entropy: empty logits");
  std::vector<float> probs(n * vocab);
  double total = 0.0;
  auto lv = logits.values();
  for (std::size_t r = 0; r < n; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range");
    const float* lr = lv.data() + r * vocab;
    const float mx = *std::max_element(lr, lr + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double e = std::exp(double(lr[j]) - mx);
      probs[r * vocab + j] = static_cast<float>(e);
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j)
      probs[r * vocab + j] = static_cast<float>(probs[r * vocab + j] / z);
    total += std::log(z) + mx - lr[t];
  }
  const float loss = static_cast<float>(total / double(n));
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return Tensor::make(
      "cross_entropy", {1}, {loss}, {logits},
      [n, vocab, probs = std::move(probs), saved = std::move(saved)](detail::Node& self) {
        const float up = self.grad[0] / static_cast<float>(n);
        std::vector<float> g(probs);
        for (std::size_t r = 0; r < n; ++r) g[r * vocab + static_cast<std::size_t>(saved[r])] -= 1.0f;
        for (auto& v : g) v *= up;
        accumulate(*self.inputs[0], g);
      });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t n_heads) {
  require_2d(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t d = q.cols();
  if (q.rows() != batch * seq) throw ShapeError("causal_attention: rows != batch * seq");
  if (n_heads == 0 || d % n_heads != 0)
    throw ShapeError("causal_attention: d_model not divisible by n_heads");
  const std::size_t hd = d / n_heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(hd));

  // probs[b][h][i][j], zero above the diagonal.
  std::vector<float> probs(batch * n_heads * seq * seq, 0.0f);
  std::vector<float> out(batch * seq * d, 0.0f);
  auto qv = q.values(), kv = k.values(), vv = v.values();
  const auto pairs = static_cast<std::ptrdiff_t>(batch * n_heads);
#pragma omp parallel for schedule(static) if (batch * n_heads * seq * seq * hd > (1u << 20))
  for (std::ptrdiff_t bh = 0; bh < pairs; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / n_heads;
    const std::size_t h = static_cast<std::size_t>(bh) % n_heads;
    // Keys transposed to [hd][seq] so the score loop runs over contiguous j.
    std::vector<float> kt(hd * seq);
    for (std::size_t j = 0; j < seq; ++j)
      for (std::size_t c = 0; c < hd; ++c) kt[c * seq + j] = kv[(b * seq + j) * d + h * hd + c];
    float* P = probs.data() + static_cast<std::size_t>(bh) * seq * seq;
    for (std::size_t i = 0; i < seq; ++i) {
      const float* qi = qv.data() + (b * seq + i) * d + h * hd;
      float* row = P + i * seq;
      for (std::size_t c = 0; c < hd; ++c) {
        const float qc = qi[c];
        const float* kc = kt.data() + c * seq;
        for (std::size_t j = 0; j <= i; ++j) row[j] += qc * kc[j];
      }
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] *= sc;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) row[j] = detail::fast_exp(row[j] - mx);
      for (std::size_t j = 0; j <= i; ++j) z += row[j];
      const float inv = static_cast<float>(1.0 / z);
      float* oi = out.data() + (b * seq + i) * d + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] *= inv;
        const float p = row[j];
        const float* vj = vv.data() + (b * seq + j) * d + h * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += p * vj[c];
      }
    }
  }

  return Tensor::make(
      "causal_attention", q.shape(), std::move(out), {q, k, v},
      [batch, seq, n_heads, d, hd, sc, probs = std::move(probs)](detail::Node& self) {
        auto& nq = *self.inputs[0];
        auto& nk = *self.inputs[1];
        auto& nv = *self.inputs[2];
        std::vector<float> gq(batch * seq * d, 0.0f), gk(gq.size(), 0.0f), gv(gq.size(), 0.0f);
        const float* G = self.grad.data();
        const auto pairs = static_cast<std::ptrdiff_t>(batch * n_heads);
#pragma omp parallel for schedule(static) if (batch * n_heads * seq * seq * hd > (1u << 20))
        for (std::ptrdiff_t bh = 0; bh < pairs; ++bh) {
          const std::size_t b = static_cast<std::size_t>(bh) / n_heads;
          const std::size_t h = static_cast<std::size_t>(bh) % n_heads;
          std::vector<float> vt(hd * seq), dp(seq);
          for (std::size_t j = 0; j < seq; ++j)
            for (std::size_t c = 0; c < hd; ++c)
              vt[c * seq + j] = nv.values[(b * seq + j) * d + h * hd + c];
          const float* P = probs.data() + static_cast<std::size_t>(bh) * seq * seq;
          for (std::size_t i = 0; i < seq; ++i) {
            const float* gi = G + (b * seq + i) * d + h * hd;
            std::fill(dp.begin(), dp.begin() + static_cast<std::ptrdiff_t>(i + 1), 0.0f);
            for (std::size_t c = 0; c < hd; ++c) {
              const float gc = gi[c];
              const float* vc = vt.data() + c * seq;
              for (std::size_t j = 0; j <= i; ++j) dp[j] += gc * vc[j];
            }
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += double(dp[j]) * P[i * seq + j];
            const float* qi = nq.values.data() + (b * seq + i) * d + h * hd;
            float* gqi = gq.data() + (b * seq + i) * d + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
              const float p = P[i * seq + j];
              const float ds = p * (dp[j] - static_cast<float>(dot)) * sc;
              const float* kj = nk.values.data() + (b * seq + j) * d + h * hd;
              float* gkj = gk.data() + (b * seq + j) * d + h * hd;
              float* gvj = gv.data() + (b * seq + j) * d + h * hd;
              for (std::size_t c = 0; c < hd; ++c) {
                gvj[c] += p * gi[c];
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
        accumulate(nq, gq);
        accumulate(nk, gk);
        accumulate(nv, gv);
      });
}

}  // namespace sbn
