#pragma once

#include <filesystem>

#include "snapdistill/trainer.hpp"

namespace fixtures {

// 8 classes in 2 superclasses; small enough for many full runs per test
inline snapdistill::DatasetPair tiny_data(snapdistill::Shape shape = {12}, std::uint64_t seed = 0) {
  snapdistill::SynthSpec s;
  s.classes = 8;
  s.superclasses = 2;
  s.per_class = 12;
  s.test_per_class = 4;
  s.sample_shape = std::move(shape);
  s.seed = seed;
  return snapdistill::synth_pair(s);
}

inline snapdistill::RunConfig tiny_config(snapdistill::TrainMode mode, int k = 2, int epochs = 4) {
  snapdistill::RunConfig c;
  c.model = snapdistill::ModelSpec::mlp({12, 16, 8});
  c.mode = mode;
  c.generations = k;
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "snapdistill_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
