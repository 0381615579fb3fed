#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snapdistill/errors.hpp"

namespace snapdistill {

/// BL: single cosine cycle. SE: cyclic restarts, no teacher. SD: cyclic
/// restarts with the previous cycle's final snapshot as teacher.
enum class TrainMode { BL, SE, SD };

std::string to_string(TrainMode mode);
TrainMode parse_mode(const std::string& text);

struct LossWeights {
  double student = 1.0;  // weight on the one-hot cross-entropy
  double teacher = 0.0;  // weight on the teacher KL term
};

/// Iteration-indexed schedule. Iterations are 1-based; `boundaries` holds the
/// cumulative ends of the first K-1 mini-generations.
struct ScheduleConfig {
  std::int64_t total_iterations = 0;
  std::vector<std::int64_t> boundaries;
  std::vector<double> base_rates;  // one per mini-generation
  double temperature = 1.0;
  TrainMode mode = TrainMode::BL;

  int generations() const { return static_cast<int>(boundaries.size()) + 1; }

  /// End iteration of mini-generation k (1-based), with L'_0 = 0 and L'_K = L.
  std::int64_t generation_end(int k) const;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  /// Stable 64-bit digest of every field; stored in checkpoints.
  std::uint64_t hash() const;

  /// Even K-way split of `epochs`, scaled to iterations. Every boundary lands
  /// on an epoch end.
  static ScheduleConfig from_epochs(int epochs, std::int64_t iterations_per_epoch, int generations,
                                    double alpha, double temperature, TrainMode mode);
};

/// Boundaries round(k * L / K) for k = 1..K-1.
std::vector<std::int64_t> partition_even(std::int64_t total, int generations);

/// Eq. c_l = max{L'_k : L'_k < l}; nullopt stands for c_l = 0 (no teacher).
std::optional<std::int64_t> teacher_index(std::int64_t iteration, std::span<const std::int64_t> boundaries);
std::optional<std::int64_t> teacher_index(std::int64_t iteration, const ScheduleConfig& config);

/// 1-based mini-generation containing `iteration`.
int mini_generation(std::int64_t iteration, const ScheduleConfig& config);

/// gamma_l = alpha_k / 2 * (1 + cos(pi * (l - L'_{k-1}) / (L'_k - L'_{k-1}))).
double learning_rate(std::int64_t iteration, const ScheduleConfig& config);

/// (1 + 1/T, 1) once a teacher exists in SD mode, (1, 0) otherwise.
LossWeights loss_weights(std::int64_t iteration, const ScheduleConfig& config);

}  // namespace snapdistill
