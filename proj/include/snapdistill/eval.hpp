#pragma once

#include <optional>
#include <span>
#include <vector>

#include "snapdistill/data.hpp"
#include "snapdistill/snapshot.hpp"

namespace snapdistill {

/// Error rates in percent.
struct ErrorRates {
  double top1 = 0.0;
  std::optional<double> top5;  // only when there are more than 5 classes
};

/// Top-k error of [N, G] logits. A label counts as hit when fewer than k
/// classes outrank it; ties rank the lower class index first.
template <typename Scalar>
ErrorRates score_logits(const Tensor<Scalar>& logits, std::span<const int> labels);

/// Eval-mode error of a parameter set on a dataset split.
template <typename Scalar>
ErrorRates evaluate(const ModelSpec& spec, const ParameterSet<Scalar>& params, const Dataset& split,
                    Index batch_size = 256);

template <typename Scalar>
ErrorRates evaluate(const Snapshot<Scalar>& snapshot, const Dataset& split, Index batch_size = 256) {
  return evaluate(snapshot.spec, snapshot.params, split, batch_size);
}

/// Uniform average of softmax(T^(k-1) * logits_k) over snapshots k = 1..K.
/// Pass temperature 1 for plain probability averaging.
template <typename Scalar>
Tensor<Scalar> ensemble_probabilities(std::span<const Tensor<Scalar>> logits, Scalar temperature);

/// Runs every snapshot on `x` and combines them with ensemble_probabilities.
/// Requires at least two snapshots sharing one model spec.
template <typename Scalar>
Tensor<Scalar> ensemble_predict(std::span<const SnapshotPtr<Scalar>> snapshots, const Tensor<Scalar>& x,
                                Scalar temperature);

template <typename Scalar>
ErrorRates evaluate_ensemble(std::span<const SnapshotPtr<Scalar>> snapshots, const Dataset& split, Scalar temperature,
                             Index batch_size = 256);

/// One row of results: per mini-generation errors, best epoch, ensemble.
struct EvalReport {
  std::vector<ErrorRates> per_snapshot;
  std::optional<ErrorRates> ensemble;
  double best_epoch_error = 0.0;
  std::int64_t best_epoch = 0;
  ErrorRates final_error;
};

}  // namespace snapdistill
