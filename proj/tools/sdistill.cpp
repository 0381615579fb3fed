// Command-line front end: `run` trains BL/SE/SD models, `eval` scores checkpoints.
#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "snapdistill/errors.hpp"
#include "snapdistill/experiment.hpp"

namespace sd = snapdistill;

namespace {

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

void print_rates(const char* label, const sd::ErrorRates& r) {
  if (r.top5) {
    std::printf("%-14s top1 %6.2f%%  top5 %6.2f%%\n", label, r.top1, *r.top5);
  } else {
    std::printf("%-14s top1 %6.2f%%\n", label, r.top1);
  }
}

int run_command(const std::string& config_file, const std::map<std::string, std::string>& overrides) {
  sd::Settings settings;
  if (!config_file.empty()) settings = sd::load_settings(config_file);
  for (const auto& [k, v] : overrides) settings[k] = v;

  auto config = sd::build_experiment(settings);
  const auto data = sd::load_data(config.data);
  std::vector<std::uint64_t> seeds = config.seeds;
  if (seeds.empty()) seeds.push_back(config.run.seed);

  for (auto seed : seeds) {
    auto one = config;
    one.run.seed = seed;
    if (seeds.size() > 1 && !one.run_id.empty()) one.run_id += "-seed" + std::to_string(seed);
    const auto outcome = sd::run_experiment(one, data);
    std::printf("run %s (mode %s, seed %llu)\n", outcome.run_dir.string().c_str(),
                sd::to_string(one.run.mode).c_str(), static_cast<unsigned long long>(seed));
    for (std::size_t k = 0; k < outcome.report.per_snapshot.size(); ++k) {
      char label[32];
      std::snprintf(label, sizeof label, "generation %zu", k + 1);
      print_rates(label, outcome.report.per_snapshot[k]);
    }
    print_rates("final", outcome.report.final_error);
    std::printf("%-14s top1 %6.2f%%  (epoch %lld)\n", "best epoch", outcome.report.best_epoch_error,
                static_cast<long long>(outcome.report.best_epoch));
    if (outcome.report.ensemble) print_rates("ensemble", *outcome.report.ensemble);
  }
  return 0;
}

int eval_command(const std::vector<std::string>& checkpoints, const std::map<std::string, std::string>& overrides,
                 double temperature) {
  std::vector<sd::SnapshotPtr<float>> snaps;
  for (const auto& path : checkpoints) snaps.push_back(sd::load_snapshot<float>(path));

  sd::Settings settings = overrides;
  auto config = sd::build_experiment(settings);
  const auto data = sd::load_data(config.data);
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    if (!(snaps[k]->spec == snaps.front()->spec)) throw sd::ConfigError("checkpoints use different models");
    print_rates(checkpoints[k].c_str(), sd::evaluate(*snaps[k], data.test));
  }
  if (snaps.size() >= 2) {
    print_rates("ensemble", sd::evaluate_ensemble<float>(snaps, data.test, static_cast<float>(temperature)));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Snapshot distillation trainer"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train one model (or a seed sweep)");
  std::string config_file;
  run->add_option("--config", config_file, "key = value settings file")->check(CLI::ExistingFile);
  std::map<std::string, std::string> run_values;
  for (const auto& key : sd::known_setting_keys()) {
    run->add_option("--" + dashed(key), run_values[key], key);
  }

  auto* eval = app.add_subcommand("eval", "score checkpoints and their ensemble on the test split");
  std::vector<std::string> checkpoints;
  double eval_temp = 1.0;
  std::map<std::string, std::string> eval_values;
  eval->add_option("checkpoints", checkpoints, "checkpoint files")->required();
  eval->add_option("--temp", eval_temp, "ensemble scaling base (1 = plain averaging)");
  for (const char* key : {"data", "model", "image_channels", "image_height", "image_width", "num_classes",
                          "synth_classes", "synth_superclasses", "synth_per_class", "synth_test_per_class",
                          "synth_shape", "synth_separation", "synth_noise", "synth_fine_spread",
                          "synth_label_noise", "synth_seed"}) {
    eval->add_option("--" + dashed(key), eval_values[key], key);
  }

  CLI11_PARSE(app, argc, argv);

  auto given = [](CLI::App* sub, const std::map<std::string, std::string>& values) {
    std::map<std::string, std::string> out;
    for (const auto& [key, value] : values) {
      if (sub->count("--" + dashed(key)) > 0) out[key] = value;
    }
    return out;
  };

  try {
    if (*run) return run_command(config_file, given(run, run_values));
    return eval_command(checkpoints, given(eval, eval_values), eval_temp);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "sdistill: error: %s\n", e.what());
    return 1;
  }
}
