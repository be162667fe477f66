#pragma once

// Dynamic-graph reverse-mode differentiation over Tensor values. Every op returns
// a Var whose node remembers its parents and a closure that pushes the
// node's gradient back to them. backward() walks the graph in reverse
// topological order.

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "npx/tensor.hpp"

namespace npx::ag {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Gradient accumulated by backward(); zeros if nothing reached this node.
  const Tensor& grad() const { return node_->ensure_grad(); }

  /// Value of a single-element Var.
  double item() const;

 private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates. loss must hold one element.
void backward(const Var& loss);

/// Leaf copy of the value; gradients stop here.
Var detach(const Var& v);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

int conv_output_size(int input, int kernel, int stride, int padding);
int conv_transpose_output_size(int input, int kernel, int stride, int padding);

// -- layers ---------------------------------------------------------------

/// x (N,Cin,H,W), weight (Cout,Cin/groups,k,k), optional bias (Cout).
Var conv2d(const Var& x, const Var& weight, const Var* bias, const ConvGeometry& geo);

/// x (N,Cin,H,W), weight (Cin,Cout,k,k), optional bias (Cout).
Var conv_transpose2d(const Var& x, const Var& weight, const Var* bias, const ConvGeometry& geo);

/// x (N,F), weight (O,F), optional bias (O).
Var linear(const Var& x, const Var& weight, const Var* bias);

struct BatchNormState {
  std::span<float> running_mean;
  std::span<float> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization of (N,C,H,W). In training mode batch statistics
/// are used and, when update_running is set, folded into the running buffers.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState state,
               bool training, bool update_running);

Var max_pool2d(const Var& x, int kernel, int stride, int padding);

/// (N,C,H,W) -> (N,C).
Var global_avg_pool(const Var& x);

// -- elementwise ------------------------------------------------------------

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var tanh(const Var& x);
/// Logistic output clamped into the open interval (0, 1).
Var sigmoid(const Var& x);
Var silu(const Var& x);
Var hardswish(const Var& x);
Var hardsigmoid(const Var& x);

/// Inverted dropout; identity when rate == 0.
Var dropout(const Var& x, double rate, std::mt19937_64& rng);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, double k);

/// Channel-wise concatenation of two (N,*,H,W) tensors.
Var concat_channels(const Var& a, const Var& b);

/// Concatenation along the batch axis.
Var concat_batch(const Var& a, const Var& b);

/// Rows [begin, end) along the batch axis.
Var slice_batch(const Var& x, int begin, int end);

/// x (N,C,H,W) * s (N,C) broadcast over space.
Var channel_scale(const Var& x, const Var& s);

/// Same data under a new shape with an equal element count.
Var reshape(const Var& x, Shape shape);

/// Multiplies every element by zero; keeps the graph edge.
Var zero_like(const Var& x);

// -- reductions -------------------------------------------------------------

/// mean((x - target)^2) over all elements.
Var mse_to_constant(const Var& x, double target);

/// mean(|a - b|). Subgradient 0 at a == b.
Var l1(const Var& a, const Var& b);

Var mean(const Var& x);

/// Scalar a*wa + b*wb.
Var weighted_sum(const Var& a, double wa, const Var& b, double wb);

/// Row-wise 1 - cos(a_i, b_i) for (N,E) inputs -> (N).
Var cosine_distance_rows(const Var& a, const Var& b);

/// Row-wise Euclidean distance -> (N).
Var euclidean_distance_rows(const Var& a, const Var& b);

/// mean_i of (1-y)d^2 + y max(0, m-d)^2 over distances d (N).
Var contrastive_loss(const Var& distances, std::span<const int> labels, double margin);

}  // namespace npx::ag
