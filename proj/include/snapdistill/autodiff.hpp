#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "snapdistill/tensor.hpp"

namespace snapdistill {

using NodeId = std::size_t;

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, NodeId id) : graph_(graph), id_(id) {}

  NodeId id() const { return id_; }
  Graph<Scalar>& graph() const { return *graph_; }
  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient accumulation buffer handed to backward closures. Contributions to
/// nodes that do not require a gradient are dropped.
template <typename Scalar>
class GradBuffer {
 public:
  using Array = typename Tensor<Scalar>::Array;

  explicit GradBuffer(const Graph<Scalar>& graph);

  template <typename Expr>
  void add(NodeId node, const Expr& contribution) {
    Array* target = slot(node);
    if (target != nullptr) *target += contribution;
  }

  /// Zero-initialized accumulator for `node`, or nullptr if it needs no gradient.
  Array* slot(NodeId node);

  bool has(NodeId node) const { return grads_[node].has_value(); }
  const Array& at(NodeId node) const { return *grads_[node]; }
  std::optional<Array>& raw(NodeId node) { return grads_[node]; }

 private:
  const Graph<Scalar>& graph_;
  std::vector<std::optional<Array>> grads_;
};

/// Append-only tape of operations. Node ids are assigned in creation order, so
/// the sequence is topologically sorted by construction.
template <typename Scalar>
class Graph {
 public:
  /// Receives the gradient flowing into this node's output and adds the
  /// contributions for its inputs.
  using Array = typename Tensor<Scalar>::Array;
  using BackwardFn = std::function<void(const Array& upstream, GradBuffer<Scalar>& grads)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> leaf(Tensor<Scalar> value, bool requires_grad = true);
  Var<Scalar> constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

  /// Records an operation. The node requires a gradient iff any input does.
  Var<Scalar> record(std::string_view op, std::vector<NodeId> inputs, Tensor<Scalar> value,
                     BackwardFn backward);

  const Tensor<Scalar>& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(NodeId id) const { return nodes_.at(id).inputs.empty() && !nodes_.at(id).backward; }
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Id of the first node (in creation order) holding a NaN or Inf, if any.
  std::optional<NodeId> first_non_finite() const;

  const BackwardFn& backward_fn(NodeId id) const { return nodes_.at(id).backward; }

 private:
  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    Tensor<Scalar> value;
    BackwardFn backward;
    bool requires_grad = false;
  };

  // deque: references returned by value() stay valid as nodes are appended.
  std::deque<Node> nodes_;
};

/// Gradients of every requires_grad leaf, keyed by node id.
template <typename Scalar>
using GradientMap = std::map<NodeId, Tensor<Scalar>>;

/// Reverse-mode sweep from a scalar `loss`. Leaves that do not influence the
/// loss map to zero tensors. Throws NumericFailure (carrying the node id) on
/// the first non-finite value or gradient.
template <typename Scalar>
GradientMap<Scalar> backward(const Graph<Scalar>& graph, Var<Scalar> loss);

// ---------------------------------------------------------------------------
// Operators. Each records forward value and backward closure on the graph of
// its first argument.

template <typename Scalar> Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);
/// x [B, in] * W^T [in, out] + bias [out].
template <typename Scalar> Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias);
template <typename Scalar> Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> scale(Var<Scalar> x, Scalar factor);
template <typename Scalar> Var<Scalar> add_scalar(Var<Scalar> x, Scalar offset);
template <typename Scalar> Var<Scalar> relu(Var<Scalar> x);
template <typename Scalar> Var<Scalar> reshape(Var<Scalar> x, Shape shape);
template <typename Scalar> Var<Scalar> sum(Var<Scalar> x);
/// sum(weights .* x) with constant weights of x's shape.
template <typename Scalar> Var<Scalar> weighted_sum(Var<Scalar> x, const Tensor<Scalar>& weights);

/// Row-wise log(softmax(x / temperature)) over the last axis of a [B, G] input.
/// Evaluated as shifted logits minus log-sum-exp, never as log of softmax.
template <typename Scalar> Var<Scalar> log_softmax(Var<Scalar> x, Scalar temperature = Scalar(1));

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

/// x [B, C, H, W], weight [O, C, kh, kw] -> [B, O, H', W']. Zero padding, no bias.
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Conv2dOptions options = {});

template <typename Scalar> Var<Scalar> avg_pool2d(Var<Scalar> x, Index kernel, Index stride);
template <typename Scalar> Var<Scalar> max_pool2d(Var<Scalar> x, Index kernel, Index stride);
/// [B, C, H, W] -> [B, C].
template <typename Scalar> Var<Scalar> global_avg_pool(Var<Scalar> x);

/// Per-channel statistics of the batch seen by a training-mode batch_norm.
template <typename Scalar>
struct BatchStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> unbiased_var;
};

/// Batch normalization over axis 1 of [B, C] or [B, C, H, W].
/// Training mode normalizes with the batch statistics (reported through
/// `batch_stats`); eval mode uses the supplied running statistics.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta,
                       const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var,
                       bool training, Scalar eps = Scalar(1e-5),
                       BatchStats<Scalar>* batch_stats = nullptr);

// ---------------------------------------------------------------------------
// Graph-free helpers.

/// Row-wise softmax(logits / temperature) over the last axis. Uses per-row max
/// subtraction. Throws ConfigError for temperature <= 0.
template <typename Scalar>
Tensor<Scalar> softmax_with_temperature(const Tensor<Scalar>& logits, Scalar temperature);

template <typename Scalar>
Tensor<Scalar> log_softmax_with_temperature(const Tensor<Scalar>& logits, Scalar temperature);

/// Shannon entropy (nats) of each row of a probability matrix.
template <typename Scalar>
std::vector<Scalar> row_entropy(const Tensor<Scalar>& probs);

}  // namespace snapdistill
