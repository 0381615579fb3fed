#pragma once

#include <cstdint>
#include <random>

#include "snapdistill/tensor.hpp"

namespace testutil {

template <typename Scalar = double>
snapdistill::Tensor<Scalar> random_tensor(snapdistill::Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  snapdistill::Tensor<Scalar> t(std::move(shape));
  for (snapdistill::Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

// keeps values away from the relu/max kinks so finite differences stay smooth
inline snapdistill::Tensor<double> away_from_zero(snapdistill::Tensor<double> t, double margin = 0.05) {
  for (snapdistill::Index i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? -margin - 0.1 : margin + 0.1;
  }
  return t;
}

}  // namespace testutil
