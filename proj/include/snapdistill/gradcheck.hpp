#pragma once

#include <functional>
#include <span>
#include <vector>

#include "snapdistill/autodiff.hpp"

namespace snapdistill {

/// Scalar-valued function of one or more tensor inputs, built on a fresh graph.
using MultiScalarFunction = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;
using ScalarFunction = std::function<Var<double>(Graph<double>&, Var<double>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences
/// (f(x + eps) - f(x - eps)) / 2eps at every coordinate of every input.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckReport check_gradients_report(const MultiScalarFunction& f, const std::vector<Tensor<double>>& points,
                                       double eps = 1e-5);

double check_gradients(const MultiScalarFunction& f, const std::vector<Tensor<double>>& points, double eps = 1e-5);
double check_gradients(const ScalarFunction& f, const Tensor<double>& point, double eps = 1e-5);

}  // namespace snapdistill
