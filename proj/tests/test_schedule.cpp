#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "snapdistill/schedule.hpp"

using namespace snapdistill;

namespace {

ScheduleConfig recipe(std::int64_t total, int k, double alpha = 0.1, double t = 2.0, TrainMode mode = TrainMode::SD) {
  ScheduleConfig c;
  c.total_iterations = total;
  c.boundaries = partition_even(total, k);
  c.base_rates.assign(static_cast<std::size_t>(k), alpha);
  c.temperature = t;
  c.mode = mode;
  return c;
}

}  // namespace

TEST_CASE("even partition of the cifar recipes") {
  CHECK(partition_even(164, 4) == std::vector<std::int64_t>{41, 82, 123});
  CHECK(partition_even(300, 4) == std::vector<std::int64_t>{75, 150, 225});
  CHECK(partition_even(10, 1).empty());
  CHECK_THROWS_AS(partition_even(3, 4), ConfigError);
  CHECK_THROWS_AS(partition_even(10, 0), ConfigError);

  for (std::int64_t total = 1; total <= 200; ++total) {
    for (int k = 1; k <= std::min<std::int64_t>(total, 9); ++k) {
      auto b = partition_even(total, k);
      REQUIRE(b.size() == static_cast<std::size_t>(k - 1));
      std::int64_t prev = 0, lo = total, hi = 0;
      b.push_back(total);
      for (auto x : b) {
        lo = std::min(lo, x - prev);
        hi = std::max(hi, x - prev);
        prev = x;
      }
      CHECK(hi - lo <= 1);
      CHECK(lo >= 1);
    }
  }
}

TEST_CASE("teacher index follows the strict inequality") {
  const std::vector<std::int64_t> b{41, 82, 123};
  CHECK_FALSE(teacher_index(1, b).has_value());
  CHECK_FALSE(teacher_index(41, b).has_value());
  CHECK(teacher_index(42, b) == 41);
  CHECK(teacher_index(82, b) == 41);
  CHECK(teacher_index(83, b) == 82);
  CHECK(teacher_index(164, b) == 123);

  auto c = recipe(164, 4);
  CHECK_THROWS_AS(teacher_index(0, c), ContractViolation);
  CHECK_THROWS_AS(teacher_index(165, c), ContractViolation);

  // piecewise constant, non-decreasing, always earlier than l
  std::int64_t last = 0;
  for (std::int64_t l = 1; l <= 164; ++l) {
    auto t = teacher_index(l, c).value_or(0);
    CHECK(t < l);
    CHECK(t >= last);
    last = t;
  }
}

TEST_CASE("cosine learning rate") {
  auto c = recipe(164, 4);
  auto oracle = [](std::int64_t l) {
    const std::int64_t edges[] = {0, 41, 82, 123, 164};
    int k = 1;
    while (l > edges[k]) ++k;
    const double phase = double(l - edges[k - 1]) / double(edges[k] - edges[k - 1]);
    return 0.5 * 0.1 * (1.0 + std::cos(std::numbers::pi * phase));
  };
  for (std::int64_t l : {1, 41, 42, 82, 164}) CHECK(learning_rate(l, c) == oracle(l));
  for (std::int64_t l : {41, 82, 123, 164}) CHECK(learning_rate(l, c) == 0.0);

  // even-length segments put an iteration exactly on the midpoint
  auto even = recipe(160, 4);
  for (std::int64_t mid : {20, 60, 100, 140}) CHECK(learning_rate(mid, even) == doctest::Approx(0.05).epsilon(1e-15));

  // first step of a segment is slightly below alpha and decreasing within it
  CHECK(learning_rate(42, c) == doctest::Approx(0.05 * (1 + std::cos(std::numbers::pi / 41))));
  for (std::int64_t l = 1; l < 164; ++l) {
    if (l == 41 || l == 82 || l == 123) {
      CHECK(learning_rate(l + 1, c) > learning_rate(l, c));
    } else {
      CHECK(learning_rate(l + 1, c) < learning_rate(l, c));
      CHECK(learning_rate(l, c) > 0.0);
    }
  }

  // K = 1 is one long cosine
  auto bl = recipe(100, 1, 0.1, 2.0, TrainMode::BL);
  CHECK(learning_rate(50, bl) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(learning_rate(100, bl) == 0.0);
}

TEST_CASE("loss weights by mode and generation") {
  auto sd = recipe(164, 4, 0.1, 2.0, TrainMode::SD);
  auto w1 = loss_weights(10, sd);
  CHECK(w1.student == 1.0);
  CHECK(w1.teacher == 0.0);
  CHECK(loss_weights(41, sd).teacher == 0.0);
  auto w2 = loss_weights(42, sd);
  CHECK(w2.student == 1.5);
  CHECK(w2.teacher == 1.0);
  CHECK(loss_weights(160, recipe(164, 4, 0.1, 4.0)).student == 1.25);

  auto se = recipe(164, 4, 0.1, 2.0, TrainMode::SE);
  for (std::int64_t l = 1; l <= 164; ++l) {
    auto w = loss_weights(l, se);
    CHECK(w.student == 1.0);
    CHECK(w.teacher == 0.0);
  }
}

TEST_CASE("mini generation lookup and validation") {
  auto c = recipe(164, 4);
  CHECK(mini_generation(1, c) == 1);
  CHECK(mini_generation(41, c) == 1);
  CHECK(mini_generation(42, c) == 2);
  CHECK(mini_generation(164, c) == 4);
  CHECK(c.generations() == 4);
  CHECK(c.generation_end(4) == 164);

  auto bad = c;
  bad.boundaries = {82, 41, 123};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.base_rates.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = recipe(164, 4, 0.1, 2.0, TrainMode::BL);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto epochs = ScheduleConfig::from_epochs(164, 391, 4, 0.1, 2.0, TrainMode::SD);
  CHECK(epochs.boundaries == std::vector<std::int64_t>{41 * 391, 82 * 391, 123 * 391});
  CHECK(epochs.total_iterations == 164 * 391);
  CHECK(epochs.hash() != c.hash());
  CHECK(c.hash() == recipe(164, 4).hash());
}

TEST_CASE("parse mode names") {
  CHECK(parse_mode("bl") == TrainMode::BL);
  CHECK(parse_mode("SE") == TrainMode::SE);
  CHECK(parse_mode("sd") == TrainMode::SD);
  CHECK(to_string(TrainMode::SD) == "sd");
  CHECK_THROWS_AS(parse_mode("kd"), ConfigError);
}
