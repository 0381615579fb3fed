#pragma once

#include <vector>

#include "snapdistill/models.hpp"

namespace snapdistill {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Apply weight decay to batch-norm scale/shift too.
  bool decay_bn = true;
};

/// Momentum buffers aligned with a ParameterSet (empty tensors for running
/// statistics, which are never optimized).
template <typename Scalar>
struct OptimizerState {
  SgdOptions options;
  std::vector<Tensor<Scalar>> momentum;

  static OptimizerState zeros_like(const ParameterSet<Scalar>& params, SgdOptions options);
  void validate() const;
};

/// Nesterov SGD with L2 weight decay:
///   g = grad + w * theta;  v = mu * v + g;  theta -= lr * (g + mu * v).
/// `grads` is aligned with `params`; entries for running statistics are ignored.
template <typename Scalar>
void sgd_step(ParameterSet<Scalar>& params, const std::vector<Tensor<Scalar>>& grads, OptimizerState<Scalar>& state,
              Scalar lr);

}  // namespace snapdistill
