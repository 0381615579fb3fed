#include "snapdistill/optim.hpp"

namespace snapdistill {

template <typename Scalar>
OptimizerState<Scalar> OptimizerState<Scalar>::zeros_like(const ParameterSet<Scalar>& params, SgdOptions options) {
  OptimizerState state;
  state.options = options;
  state.momentum.reserve(params.size());
  for (const auto& p : params) {
    state.momentum.push_back(p.trainable() ? Tensor<Scalar>::zeros(p.value.shape()) : Tensor<Scalar>());
  }
  state.validate();
  return state;
}

template <typename Scalar>
void OptimizerState<Scalar>::validate() const {
  if (!(options.momentum >= 0.0 && options.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(options.weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
}

template <typename Scalar>
void sgd_step(ParameterSet<Scalar>& params, const std::vector<Tensor<Scalar>>& grads, OptimizerState<Scalar>& state,
              Scalar lr) {
  if (grads.size() != params.size() || state.momentum.size() != params.size()) {
    throw ContractViolation("sgd_step: gradients/momentum do not match the parameter set");
  }
  if (!(lr >= Scalar(0))) throw ContractViolation("sgd_step: learning rate must be non-negative");
  const auto mu = static_cast<Scalar>(state.options.momentum);
  const auto wd = static_cast<Scalar>(state.options.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable()) continue;
    if (grads[i].shape() != p.value.shape() || state.momentum[i].shape() != p.value.shape()) {
      throw ContractViolation("sgd_step: shape mismatch for '" + p.name + "'");
    }
    if (!grads[i].all_finite()) throw NumericFailure("sgd_step: non-finite gradient for '" + p.name + "'");
    const bool decays = state.options.decay_bn || (p.role != ParamRole::BnScale && p.role != ParamRole::BnShift);
    auto& theta = p.value.values();
    auto& v = state.momentum[i].values();
    const typename Tensor<Scalar>::Array g = decays ? (grads[i].values() + wd * theta).eval() : grads[i].values();
    v = mu * v + g;
    theta -= lr * (g + mu * v);
  }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void sgd_step(ParameterSet<float>&, const std::vector<Tensor<float>>&, OptimizerState<float>&, float);
template void sgd_step(ParameterSet<double>&, const std::vector<Tensor<double>>&, OptimizerState<double>&, double);

}  // namespace snapdistill
