#include "snapdistill/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace snapdistill {

namespace {

double evaluate(const MultiScalarFunction& f, const std::vector<Tensor<double>>& points) {
  Graph<double> graph;
  std::vector<Var<double>> inputs;
  inputs.reserve(points.size());
  for (const auto& p : points) inputs.push_back(graph.constant(p));
  const double value = f(graph, inputs).value().item();
  if (!std::isfinite(value)) throw NumericFailure("non-finite function value during gradient check");
  return value;
}

}  // namespace

GradCheckReport check_gradients_report(const MultiScalarFunction& f, const std::vector<Tensor<double>>& points,
                                       double eps) {
  Graph<double> graph;
  std::vector<Var<double>> inputs;
  inputs.reserve(points.size());
  for (const auto& p : points) inputs.push_back(graph.leaf(p, true));
  const auto grads = backward(graph, f(graph, inputs));

  GradCheckReport report;
  std::vector<Tensor<double>> probe = points;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const auto& analytic = grads.at(inputs[k].id());
    for (Index i = 0; i < points[k].size(); ++i) {
      const double x0 = points[k][i];
      probe[k][i] = x0 + eps;
      const double up = evaluate(f, probe);
      probe[k][i] = x0 - eps;
      const double down = evaluate(f, probe);
      probe[k][i] = x0;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      if (err > report.max_rel_error || std::isnan(err)) {
        report = {err, k, i, analytic[i], numeric};
      }
    }
  }
  return report;
}

double check_gradients(const MultiScalarFunction& f, const std::vector<Tensor<double>>& points, double eps) {
  return check_gradients_report(f, points, eps).max_rel_error;
}

double check_gradients(const ScalarFunction& f, const Tensor<double>& point, double eps) {
  return check_gradients(
      [&f](Graph<double>& g, std::span<const Var<double>> in) { return f(g, in[0]); }, {point}, eps);
}

}  // namespace snapdistill
