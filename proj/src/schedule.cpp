#include "snapdistill/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "snapdistill/errors.hpp"
#include "snapdistill/tensor.hpp"

namespace snapdistill {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::BL: return "bl";
    case TrainMode::SE: return "se";
    case TrainMode::SD: return "sd";
  }
  return "?";
}

TrainMode parse_mode(const std::string& text) {
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "bl") return TrainMode::BL;
  if (lower == "se") return TrainMode::SE;
  if (lower == "sd") return TrainMode::SD;
  throw ConfigError("unknown training mode '" + text + "' (expected bl, se or sd)");
}

std::int64_t ScheduleConfig::generation_end(int k) const {
  if (k <= 0) return 0;
  if (k >= generations()) return total_iterations;
  return boundaries[static_cast<std::size_t>(k - 1)];
}

void ScheduleConfig::validate() const {
  if (total_iterations <= 0) throw ConfigError("schedule: total iterations must be positive");
  std::int64_t prev = 0;
  for (auto b : boundaries) {
    if (b <= prev) throw ConfigError("schedule: boundaries must be strictly increasing and positive");
    prev = b;
  }
  if (prev >= total_iterations && !boundaries.empty()) {
    throw ConfigError("schedule: last boundary must precede the final iteration");
  }
  if (base_rates.size() != static_cast<std::size_t>(generations())) {
    throw ConfigError("schedule: need one base rate per mini-generation (" + std::to_string(generations()) +
                      "), got " + std::to_string(base_rates.size()));
  }
  for (double a : base_rates) {
    if (!(a > 0.0)) throw ConfigError("schedule: base rates must be positive");
  }
  if (!(temperature >= 1.0)) throw ConfigError("schedule: temperature must be >= 1");
  if (mode == TrainMode::BL && !boundaries.empty()) {
    throw ConfigError("schedule: BL mode uses a single mini-generation (K = 1)");
  }
}

std::uint64_t ScheduleConfig::hash() const {
  std::uint64_t h = fnv1a(&total_iterations, sizeof total_iterations);
  h = fnv1a(boundaries.data(), boundaries.size() * sizeof(std::int64_t), h);
  h = fnv1a(base_rates.data(), base_rates.size() * sizeof(double), h);
  h = fnv1a(&temperature, sizeof temperature, h);
  const auto m = static_cast<std::uint8_t>(mode);
  return fnv1a(&m, 1, h);
}

ScheduleConfig ScheduleConfig::from_epochs(int epochs, std::int64_t iterations_per_epoch, int generations,
                                           double alpha, double temperature, TrainMode mode) {
  if (iterations_per_epoch <= 0) throw ConfigError("schedule: iterations per epoch must be positive");
  ScheduleConfig config;
  config.total_iterations = static_cast<std::int64_t>(epochs) * iterations_per_epoch;
  for (auto b : partition_even(epochs, generations)) config.boundaries.push_back(b * iterations_per_epoch);
  config.base_rates.assign(static_cast<std::size_t>(generations), alpha);
  config.temperature = temperature;
  config.mode = mode;
  return config;
}

std::vector<std::int64_t> partition_even(std::int64_t total, int generations) {
  if (generations < 1) throw ConfigError("partition: need at least one mini-generation");
  if (generations > total) {
    throw ConfigError("partition: " + std::to_string(generations) + " mini-generations exceed " +
                      std::to_string(total) + " units");
  }
  std::vector<std::int64_t> out;
  const std::int64_t k_total = generations;
  for (std::int64_t k = 1; k < k_total; ++k) {
    // round half up of k * total / K in integer arithmetic
    out.push_back((2 * k * total + k_total) / (2 * k_total));
  }
  return out;
}

std::optional<std::int64_t> teacher_index(std::int64_t iteration, std::span<const std::int64_t> boundaries) {
  if (iteration < 1) throw ContractViolation("teacher_index: iteration must be >= 1");
  auto it = std::lower_bound(boundaries.begin(), boundaries.end(), iteration);
  if (it == boundaries.begin()) return std::nullopt;
  return *std::prev(it);
}

namespace {

void check_range(std::int64_t iteration, const ScheduleConfig& config, const char* op) {
  if (iteration < 1 || iteration > config.total_iterations) {
    throw ContractViolation(std::string(op) + ": iteration " + std::to_string(iteration) + " outside [1, " +
                            std::to_string(config.total_iterations) + "]");
  }
}

}  // namespace

std::optional<std::int64_t> teacher_index(std::int64_t iteration, const ScheduleConfig& config) {
  check_range(iteration, config, "teacher_index");
  return teacher_index(iteration, std::span<const std::int64_t>(config.boundaries));
}

int mini_generation(std::int64_t iteration, const ScheduleConfig& config) {
  check_range(iteration, config, "mini_generation");
  auto it = std::lower_bound(config.boundaries.begin(), config.boundaries.end(), iteration);
  return static_cast<int>(it - config.boundaries.begin()) + 1;
}

double learning_rate(std::int64_t iteration, const ScheduleConfig& config) {
  const int k = mini_generation(iteration, config);
  const auto start = config.generation_end(k - 1);
  const auto end = config.generation_end(k);
  const double phase = static_cast<double>(iteration - start) / static_cast<double>(end - start);
  return 0.5 * config.base_rates[static_cast<std::size_t>(k - 1)] * (1.0 + std::cos(phase * std::numbers::pi));
}

LossWeights loss_weights(std::int64_t iteration, const ScheduleConfig& config) {
  if (config.mode != TrainMode::SD || !teacher_index(iteration, config)) return {1.0, 0.0};
  return {1.0 + 1.0 / config.temperature, 1.0};
}

}  // namespace snapdistill
