#pragma once

#include <optional>
#include <span>

#include "snapdistill/autodiff.hpp"
#include "snapdistill/schedule.hpp"

namespace snapdistill {

/// Values of the two loss terms and the weights that combined them.
struct LossBreakdown {
  double total = 0.0;
  double ce_term = 0.0;
  double kl_term = 0.0;
  double lambda_s = 1.0;
  double lambda_t = 0.0;
};

template <typename Scalar>
struct SdLoss {
  Var<Scalar> total;
  LossBreakdown breakdown;
};

/// Mean negative log-likelihood of `labels` under softmax(logits).
template <typename Scalar>
Var<Scalar> ce_loss(Var<Scalar> logits, std::span<const int> labels);

/// Batch mean of KL(softmax(teacher / T) || softmax(student)). Only the
/// teacher is softened; the teacher is treated as a constant.
template <typename Scalar>
Var<Scalar> kl_asymmetric(const Tensor<Scalar>& teacher_logits, Var<Scalar> student_logits, Scalar temperature);

/// Same, taking the teacher from a graph node; the node receives no gradient.
template <typename Scalar>
Var<Scalar> kl_asymmetric(Var<Scalar> teacher_logits, Var<Scalar> student_logits, Scalar temperature);

/// Classic symmetric softening KL(softmax(t / T) || softmax(s / T)), kept for
/// comparison with the asymmetric form.
template <typename Scalar>
Var<Scalar> kl_symmetric(const Tensor<Scalar>& teacher_logits, Var<Scalar> student_logits, Scalar temperature);

/// lambda_s * CE + lambda_t * KL_asym. With lambda_t == 0 the KL branch is not
/// built and the result is lambda_s * CE. lambda_t > 0 requires a teacher.
template <typename Scalar>
SdLoss<Scalar> sd_loss(Var<Scalar> student_logits, std::span<const int> labels,
                       const Tensor<Scalar>* teacher_logits, LossWeights weights, Scalar temperature);

}  // namespace snapdistill
