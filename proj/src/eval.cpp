#include "snapdistill/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace snapdistill {

template <typename Scalar>
ErrorRates score_logits(const Tensor<Scalar>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ContractViolation("score_logits: expected [N, G], got " + shape_string(logits.shape()));
  const Index n = logits.dim(0), classes = logits.dim(1);
  if (n == 0 || static_cast<Index>(labels.size()) != n) {
    throw ContractViolation("score_logits: empty split or label count mismatch");
  }
  auto z = logits.matrix(n, classes);
  Index miss1 = 0, miss5 = 0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) throw ContractViolation("score_logits: label out of range");
    Index rank = 0;
    for (Index c = 0; c < classes; ++c) {
      if (z(r, c) > z(r, y) || (z(r, c) == z(r, y) && c < y)) ++rank;
    }
    miss1 += rank >= 1;
    miss5 += rank >= 5;
  }
  ErrorRates out;
  out.top1 = 100.0 * static_cast<double>(miss1) / static_cast<double>(n);
  if (classes > 5) out.top5 = 100.0 * static_cast<double>(miss5) / static_cast<double>(n);
  return out;
}

namespace {

template <typename Scalar, typename LogitFn>
ErrorRates evaluate_batched(const Dataset& split, Index batch_size, Index classes, LogitFn&& logits_of) {
  if (split.size() == 0) throw ContractViolation("evaluate: empty split");
  if (batch_size <= 0) throw ContractViolation("evaluate: batch size must be positive");
  Tensor<Scalar> all(Shape{split.size(), classes});
  std::vector<Index> idx;
  for (Index start = 0; start < split.size(); start += batch_size) {
    const Index end = std::min(split.size(), start + batch_size);
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<Scalar> out = logits_of(split.template batch<Scalar>(idx));
    all.values().segment(start * classes, (end - start) * classes) = out.values();
  }
  return score_logits(all, split.labels);
}

}  // namespace

template <typename Scalar>
ErrorRates evaluate(const ModelSpec& spec, const ParameterSet<Scalar>& params, const Dataset& split,
                    Index batch_size) {
  return evaluate_batched<Scalar>(split, batch_size, spec.classes(),
                                  [&](const Tensor<Scalar>& x) { return predict(spec, params, x); });
}

template <typename Scalar>
Tensor<Scalar> ensemble_probabilities(std::span<const Tensor<Scalar>> logits, Scalar temperature) {
  if (logits.size() < 2) throw ContractViolation("ensemble: need at least two members");
  if (!(temperature > Scalar(0))) throw ConfigError("ensemble: temperature must be positive");
  Tensor<Scalar> avg(logits[0].shape());
  Scalar factor = 1;
  for (const auto& z : logits) {
    if (z.shape() != logits[0].shape()) throw ContractViolation("ensemble: member logits differ in shape");
    Tensor<Scalar> scaled(z.shape(), z.values() * factor);
    avg.values() += softmax_with_temperature(scaled, Scalar(1)).values();
    factor *= temperature;
  }
  avg.values() /= static_cast<Scalar>(logits.size());
  return avg;
}

template <typename Scalar>
Tensor<Scalar> ensemble_predict(std::span<const SnapshotPtr<Scalar>> snapshots, const Tensor<Scalar>& x,
                                Scalar temperature) {
  if (snapshots.size() < 2) throw ContractViolation("ensemble: need at least two snapshots");
  for (const auto& s : snapshots) {
    if (!(s->spec == snapshots[0]->spec)) throw ConfigError("ensemble: snapshots have different model specs");
  }
  std::vector<Tensor<Scalar>> logits;
  logits.reserve(snapshots.size());
  for (const auto& s : snapshots) logits.push_back(s->logits(x));
  return ensemble_probabilities<Scalar>(logits, temperature);
}

template <typename Scalar>
ErrorRates evaluate_ensemble(std::span<const SnapshotPtr<Scalar>> snapshots, const Dataset& split, Scalar temperature,
                             Index batch_size) {
  if (snapshots.empty()) throw ContractViolation("ensemble: no snapshots");
  return evaluate_batched<Scalar>(split, batch_size, snapshots[0]->spec.classes(), [&](const Tensor<Scalar>& x) {
    return ensemble_predict(snapshots, x, temperature);
  });
}

#define SNAPDISTILL_INSTANTIATE(S)                                                                    \
  template ErrorRates score_logits(const Tensor<S>&, std::span<const int>);                           \
  template ErrorRates evaluate(const ModelSpec&, const ParameterSet<S>&, const Dataset&, Index);      \
  template Tensor<S> ensemble_probabilities(std::span<const Tensor<S>>, S);                           \
  template Tensor<S> ensemble_predict(std::span<const SnapshotPtr<S>>, const Tensor<S>&, S);          \
  template ErrorRates evaluate_ensemble(std::span<const SnapshotPtr<S>>, const Dataset&, S, Index);

SNAPDISTILL_INSTANTIATE(float)
SNAPDISTILL_INSTANTIATE(double)

#undef SNAPDISTILL_INSTANTIATE

}  // namespace snapdistill
