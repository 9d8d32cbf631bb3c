#pragma once

// Minimal define-by-run reverse-mode autodiff over dense row-major float32
// tensors. A Tensor is a shared handle to a graph node; ops record their
// inputs and a backward rule, and Tensor::backward() walks the graph in
// reverse topological order, visiting every node once and summing gradient
// contributions.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sbn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  std::string op;
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<float>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t dim(std::size_t i) const;
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only
  const std::string& op() const;

  std::span<const float> values() const;
  // Direct write access; intended for parameters (optimizer updates, loading).
  std::span<float> mutable_values();
  float item() const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // Seeds d(self)/d(self) = 1 (self must be a single element) and runs the
  // backward pass through every reachable node that requires grad.
  void backward() const;
  // Same, seeded with an explicit upstream gradient of matching size.
  void backward(std::span<const float> seed) const;

  // A leaf holding a copy of the values with no history.
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: graph construction for ops.
  static Tensor make(std::string op, Shape shape, std::vector<float> values,
                     std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward);
  detail::Node& node() const { return *node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while alive. Ops still
// compute values; results are leaves without backward rules.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

bool grad_enabled();

// Training step reported by NumericFault. Thread-local.
void set_current_step(std::int64_t step);
std::int64_t current_step();

// Throws NumericFault if any value is NaN/Inf.
void check_finite(const std::string& op, std::span<const float> values);

// ---------------------------------------------------------------------------
// Custom-gradient boundary. forward_values are the already-computed outputs;
// backward_fn maps the output gradient to one gradient array per input, each
// of the input's size (an empty vector means "no gradient" for that input).
// The interior of the forward computation is never differentiated.

using CustomBackward =
    std::function<std::vector<std::vector<float>>(std::span<const float> grad_out)>;

Tensor custom_grad(std::string op, std::vector<Tensor> inputs, Shape out_shape,
                   std::vector<float> forward_values, CustomBackward backward_fn);

// Convenience form: forward_fn computes the outputs from the input values.
using CustomForward =
    std::function<std::vector<float>(const std::vector<std::span<const float>>& inputs)>;

Tensor custom_grad(std::string op, std::vector<Tensor> inputs, Shape out_shape,
                   const CustomForward& forward_fn, CustomBackward backward_fn);

// ---------------------------------------------------------------------------
// Differentiable ops.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);
// Row-wise RMS normalisation of a [rows, d] tensor with a learned gain [d].
Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps = 1e-6f);
// Softmax along the last axis of a 2-D tensor.
Tensor softmax(const Tensor& x);
// Rows of table [V, d] selected by ids -> [ids.size(), d].
Tensor embedding_gather(const Tensor& table, std::span<const std::int32_t> ids);
// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);
// Multi-head causal self-attention. q, k, v are [batch * seq, d_model] with
// heads laid out as contiguous column blocks of width d_model / n_heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq, std::size_t n_heads);

}  // namespace sbn
