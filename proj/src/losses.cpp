#include "snapdistill/losses.hpp"

#include <cmath>
#include <iostream>

namespace snapdistill {

namespace {

template <typename Scalar>
void check_logits(const Shape& s, const char* op) {
  if (s.size() != 2) throw ContractViolation(std::string(op) + ": expected [B, G] logits, got " + shape_string(s));
}

template <typename Scalar>
Var<Scalar> kl_from_probs(const Tensor<Scalar>& teacher_probs, Var<Scalar> student_log_probs) {
  const Index batch = teacher_probs.dim(0);
  const auto& p = teacher_probs.values();
  // sum p ln p, skipping exact zeros (0 ln 0 = 0)
  Scalar entropy_term = 0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p[i] > Scalar(0)) entropy_term += p[i] * std::log(p[i]);
  }
  Tensor<Scalar> weights(teacher_probs.shape(), -p / static_cast<Scalar>(batch));
  auto cross = weighted_sum(student_log_probs, weights);
  return add_scalar(cross, entropy_term / static_cast<Scalar>(batch));
}

}  // namespace

template <typename Scalar>
Var<Scalar> ce_loss(Var<Scalar> logits, std::span<const int> labels) {
  check_logits<Scalar>(logits.shape(), "ce_loss");
  const Index batch = logits.shape()[0], classes = logits.shape()[1];
  if (static_cast<Index>(labels.size()) != batch) {
    throw ContractViolation("ce_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                            std::to_string(batch));
  }
  Tensor<Scalar> weights(logits.shape());
  const Scalar w = Scalar(-1) / static_cast<Scalar>(batch);
  for (Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) {
      throw ContractViolation("ce_loss: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
    weights[b * classes + y] = w;
  }
  return weighted_sum(log_softmax(logits), weights);
}

template <typename Scalar>
Var<Scalar> kl_asymmetric(const Tensor<Scalar>& teacher_logits, Var<Scalar> student_logits, Scalar temperature) {
  check_logits<Scalar>(student_logits.shape(), "kl_asymmetric");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ContractViolation("kl_asymmetric: teacher " + shape_string(teacher_logits.shape()) + " vs student " +
                            shape_string(student_logits.shape()));
  }
  if (temperature < Scalar(1)) {
    std::cerr << "warning: distillation temperature " << temperature << " < 1\n";
  }
  return kl_from_probs(softmax_with_temperature(teacher_logits, temperature), log_softmax(student_logits));
}

template <typename Scalar>
Var<Scalar> kl_asymmetric(Var<Scalar> teacher_logits, Var<Scalar> student_logits, Scalar temperature) {
  return kl_asymmetric(teacher_logits.value(), student_logits, temperature);
}

template <typename Scalar>
Var<Scalar> kl_symmetric(const Tensor<Scalar>& teacher_logits, Var<Scalar> student_logits, Scalar temperature) {
  check_logits<Scalar>(student_logits.shape(), "kl_symmetric");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ContractViolation("kl_symmetric: teacher/student shape mismatch");
  }
  return kl_from_probs(softmax_with_temperature(teacher_logits, temperature),
                       log_softmax(student_logits, temperature));
}

template <typename Scalar>
SdLoss<Scalar> sd_loss(Var<Scalar> student_logits, std::span<const int> labels,
                       const Tensor<Scalar>* teacher_logits, LossWeights weights, Scalar temperature) {
  if (weights.teacher > 0.0 && teacher_logits == nullptr) {
    throw ContractViolation("sd_loss: teacher weight " + std::to_string(weights.teacher) +
                            " without teacher logits");
  }
  SdLoss<Scalar> out;
  out.breakdown.lambda_s = weights.student;
  out.breakdown.lambda_t = weights.teacher;

  auto ce = ce_loss(student_logits, labels);
  out.breakdown.ce_term = static_cast<double>(ce.value().item());
  auto total = weights.student == 1.0 ? ce : scale(ce, static_cast<Scalar>(weights.student));
  if (weights.teacher > 0.0) {
    auto kl = kl_asymmetric(*teacher_logits, student_logits, temperature);
    out.breakdown.kl_term = static_cast<double>(kl.value().item());
    total = add(total, weights.teacher == 1.0 ? kl : scale(kl, static_cast<Scalar>(weights.teacher)));
  }
  out.total = total;
  out.breakdown.total = static_cast<double>(total.value().item());
  return out;
}

#define SNAPDISTILL_INSTANTIATE(S)                                                                  \
  template Var<S> ce_loss(Var<S>, std::span<const int>);                                            \
  template Var<S> kl_asymmetric(const Tensor<S>&, Var<S>, S);                                       \
  template Var<S> kl_asymmetric(Var<S>, Var<S>, S);                                                 \
  template Var<S> kl_symmetric(const Tensor<S>&, Var<S>, S);                                        \
  template SdLoss<S> sd_loss(Var<S>, std::span<const int>, const Tensor<S>*, LossWeights, S);

SNAPDISTILL_INSTANTIATE(float)
SNAPDISTILL_INSTANTIATE(double)

#undef SNAPDISTILL_INSTANTIATE

}  // namespace snapdistill
