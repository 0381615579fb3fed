#include "snapdistill/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace snapdistill {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string normalize_key(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

class Lookup {
 public:
  explicit Lookup(const Settings& s) : s_(s) {}

  std::optional<std::string> str(const std::string& key) const {
    auto it = s_.find(key);
    if (it == s_.end()) return std::nullopt;
    return it->second;
  }
  template <typename T>
  std::optional<T> num(const std::string& key) const {
    auto v = str(key);
    if (!v) return std::nullopt;
    std::istringstream in(*v);
    T out{};
    in >> out;
    if (in.fail() || !(in >> std::ws).eof()) throw ConfigError("key '" + key + "': cannot parse '" + *v + "'");
    return out;
  }
  std::optional<bool> flag(const std::string& key) const {
    auto v = str(key);
    if (!v) return std::nullopt;
    if (*v == "1" || *v == "true" || *v == "yes" || *v == "on") return true;
    if (*v == "0" || *v == "false" || *v == "no" || *v == "off") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + *v + "'");
  }

 private:
  const Settings& s_;
};

Shape parse_shape(const std::string& text, const std::string& key) {
  Shape shape;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) {
    try {
      shape.push_back(static_cast<Index>(std::stoll(part)));
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': bad shape '" + text + "'");
    }
  }
  if (shape.empty()) throw ConfigError("key '" + key + "': empty shape");
  return shape;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      out.push_back(std::stoull(trim(part)));
    } catch (const std::exception&) {
      throw ConfigError("key 'seeds': bad seed '" + part + "'");
    }
  }
  return out;
}

}  // namespace

Settings parse_settings(const std::string& text, const std::string& source) {
  Settings out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = normalize_key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

Settings load_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_settings(ss.str(), path.string());
}

const std::vector<std::string>& known_setting_keys() {
  static const std::vector<std::string> keys{
      "mode", "model", "epochs", "batch", "k", "temp", "alpha", "lambda_s", "lambda_t", "seed", "seeds", "data", "out",
      "run_id", "resume", "fork_seed", "restart_schedule", "momentum", "weight_decay", "decay_bn", "augment", "pad",
      "reflect_pad", "checkpoints", "verbose", "image_channels", "image_height", "image_width", "num_classes",
      "synth_classes", "synth_superclasses", "synth_per_class", "synth_test_per_class", "synth_shape",
      "synth_separation", "synth_noise", "synth_fine_spread", "synth_label_noise", "synth_seed"};
  return keys;
}

ExperimentConfig build_experiment(const Settings& settings) {
  const auto& keys = known_setting_keys();
  for (const auto& [key, value] : settings) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown key '" + key + "'");
  }
  Lookup get(settings);
  ExperimentConfig cfg;
  RunConfig& run = cfg.run;

  if (auto v = get.str("mode")) run.mode = parse_mode(*v);
  run.epochs = get.num<int>("epochs").value_or(run.epochs);
  run.batch_size = get.num<Index>("batch").value_or(run.batch_size);
  run.generations = get.num<int>("k").value_or(run.generations);
  run.temperature = get.num<double>("temp").value_or(run.temperature);
  run.alpha = get.num<double>("alpha").value_or(run.alpha);
  run.lambda_s = get.num<double>("lambda_s");
  run.lambda_t = get.num<double>("lambda_t");
  run.seed = get.num<std::uint64_t>("seed").value_or(run.seed);
  run.sgd.momentum = get.num<double>("momentum").value_or(run.sgd.momentum);
  run.sgd.weight_decay = get.num<double>("weight_decay").value_or(run.sgd.weight_decay);
  run.sgd.decay_bn = get.flag("decay_bn").value_or(run.sgd.decay_bn);
  run.augment = get.flag("augment").value_or(run.augment);
  run.augment_options.pad = get.num<Index>("pad").value_or(run.augment_options.pad);
  run.augment_options.reflect = get.flag("reflect_pad").value_or(false);
  if (run.mode == TrainMode::BL && settings.count("k") && run.generations != 1) {
    throw ConfigError("key 'k': bl mode always uses a single mini-generation");
  }
  if (run.mode == TrainMode::BL) run.generations = 1;
  if (run.mode != TrainMode::SD && (run.lambda_s || run.lambda_t)) {
    throw ConfigError("key '" + std::string(run.lambda_s ? "lambda_s" : "lambda_t") + "': only meaningful in sd mode");
  }

  if (auto v = get.str("seeds")) cfg.seeds = parse_seeds(*v);
  if (auto v = get.str("out")) cfg.out_dir = *v;
  cfg.run_id = get.str("run_id").value_or("");
  if (auto v = get.str("resume")) cfg.resume = *v;
  if (auto v = get.num<std::uint64_t>("fork_seed")) cfg.fork_seed = *v;
  cfg.restart_schedule = get.flag("restart_schedule").value_or(false);
  cfg.checkpoints = get.flag("checkpoints").value_or(true);
  cfg.verbose = get.flag("verbose").value_or(false);
  if (cfg.fork_seed && !cfg.resume) throw ConfigError("key 'fork_seed': requires 'resume' to name a checkpoint");
  if (cfg.resume && !cfg.seeds.empty()) throw ConfigError("key 'seeds': cannot sweep seeds while resuming");

  cfg.model_name = get.str("model").value_or("mlp");
  DataConfig& data = cfg.data;
  data.source = get.str("data").value_or("synth");
  if (data.source == "synth") {
    SynthSpec& s = data.synth;
    s.classes = get.num<int>("synth_classes").value_or(20);
    s.superclasses = get.num<int>("synth_superclasses").value_or(4);
    s.per_class = get.num<Index>("synth_per_class").value_or(100);
    s.test_per_class = get.num<Index>("synth_test_per_class").value_or(25);
    const bool image_model = cfg.model_name.starts_with("resnet");
    s.sample_shape = parse_shape(get.str("synth_shape").value_or(image_model ? "3x16x16" : "32"), "synth_shape");
    s.separation = get.num<double>("synth_separation").value_or(1.0);
    s.noise = get.num<double>("synth_noise").value_or(1.0);
    s.fine_spread = get.num<double>("synth_fine_spread").value_or(s.fine_spread);
    s.label_noise = get.num<double>("synth_label_noise").value_or(0.0);
    s.seed = get.num<std::uint64_t>("synth_seed").value_or(0);
    s.validate();
    run.model = ModelSpec::from_name(cfg.model_name, s.classes, s.sample_shape);
  } else {
    ImageFormat& f = data.image;
    f.channels = get.num<Index>("image_channels").value_or(3);
    f.height = get.num<Index>("image_height").value_or(32);
    f.width = get.num<Index>("image_width").value_or(32);
    f.num_classes = get.num<int>("num_classes").value_or(10);
    run.model = ModelSpec::from_name(cfg.model_name, f.num_classes, {f.channels, f.height, f.width});
  }
  run.validate();
  return cfg;
}

DatasetPair load_data(const DataConfig& data) {
  if (data.source == "synth") return synth_pair(data.synth);
  const std::filesystem::path dir(data.source);
  for (const char* name : {"train.bin", "test.bin"}) {
    if (!std::filesystem::exists(dir / name)) {
      throw IoError("dataset file '" + (dir / name).string() + "' not found (data = '" + data.source + "')");
    }
  }
  return load_image_pair((dir / "train.bin").string(), (dir / "test.bin").string(), data.image);
}

EvalReport make_report(const TrainResult<float>& result, const RunConfig& config, const Dataset& test) {
  EvalReport report;
  for (const auto& s : result.snapshots) report.per_snapshot.push_back(evaluate(*s, test));
  if (result.snapshots.size() >= 2) {
    // SD scales member k by T^(k-1); SE averages plain softmax outputs. An SD run whose
    // teacher weight is forced to zero never distills, so it takes the SE rule.
    const bool distilled = config.mode == TrainMode::SD && config.lambda_t.value_or(1.0) != 0.0;
    const float t = distilled ? static_cast<float>(config.temperature) : 1.0f;
    report.ensemble = evaluate_ensemble<float>(result.snapshots, test, t);
  }
  report.final_error = evaluate(result.model.spec(), result.model.params(), test);
  report.best_epoch = result.best_epoch;
  report.best_epoch_error = result.best_test_err;
  return report;
}

std::string format_summary(const EvalReport& report, const ExperimentConfig& config, std::uint64_t seed) {
  using nlohmann::json;
  auto rates = [](const ErrorRates& r) {
    json j{{"top1", r.top1}};
    if (r.top5) j["top5"] = *r.top5;
    return j;
  };
  json j;
  j["mode"] = to_string(config.run.mode);
  j["model"] = config.run.model.descriptor();
  j["seed"] = seed;
  j["epochs"] = config.run.epochs;
  j["k"] = config.run.effective_generations();
  j["temperature"] = config.run.temperature;
  j["per_generation"] = json::array();
  for (const auto& r : report.per_snapshot) j["per_generation"].push_back(rates(r));
  j["best"] = {{"epoch", report.best_epoch}, {"top1", report.best_epoch_error}};
  j["final"] = rates(report.final_error);
  j["ensemble"] = report.ensemble ? rates(*report.ensemble) : json(nullptr);
  return j.dump(2) + "\n";
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (trim(line) != kMetricsHeader) throw FormatError("metrics file '" + path.string() + "' has unexpected header", 0);
  std::vector<MetricsRecord> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 13) throw FormatError("metrics file '" + path.string() + "': row with " + std::to_string(f.size()) + " fields", 0);
    MetricsRecord r;
    r.epoch = std::stoll(f[0]);
    r.iteration = std::stoll(f[1]);
    r.mode = parse_mode(f[2]);
    r.mini_gen = std::stoi(f[3]);
    r.lr = std::stod(f[4]);
    r.lambda_s = std::stod(f[5]);
    r.lambda_t = std::stod(f[6]);
    r.loss_total = std::stod(f[7]);
    r.loss_ce = std::stod(f[8]);
    r.loss_kl = std::stod(f[9]);
    r.train_err = std::stod(f[10]);
    r.test_err = std::stod(f[11]);
    r.teacher_iter = std::stoll(f[12]);
    rows.push_back(r);
  }
  return rows;
}

namespace {

std::string default_run_id(const ExperimentConfig& config) {
  std::string id = to_string(config.run.mode) + "-" + config.model_name + "-seed" + std::to_string(config.run.seed);
  std::replace(id.begin(), id.end(), ':', '_');
  std::replace(id.begin(), id.end(), ',', '_');
  if (config.fork_seed) id += "-fork" + std::to_string(*config.fork_seed);
  return id;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& config, const DatasetPair& data) {
  const auto run_dir = config.out_dir / (config.run_id.empty() ? default_run_id(config) : config.run_id);
  std::filesystem::create_directories(run_dir);

  std::optional<Trainer<float>> trainer;
  std::vector<MetricsRecord> previous_rows;
  std::vector<SnapshotPtr<float>> previous_snapshots;
  if (config.resume) {
    auto state = load_checkpoint<float>(*config.resume);
    if (config.fork_seed) {
      ForkOptions fork{*config.fork_seed, config.restart_schedule, config.run.model};
      state = fork_run(state, fork);
    }
    const auto source_dir = config.resume->parent_path();
    // earlier mini-generation snapshots and metric rows live next to the checkpoint
    if (!(config.fork_seed && config.restart_schedule)) {
      const auto schedule = config.run.schedule(data.train.size());
      std::vector<std::int64_t> ends = schedule.boundaries;
      for (auto b : ends) {
        if (b > state.iteration) break;
        const auto p = checkpoint_path(source_dir, b);
        if (!std::filesystem::exists(p)) throw IoError("resume needs earlier snapshot '" + p.string() + "'");
        previous_snapshots.push_back(load_snapshot<float>(p));
      }
      if (std::filesystem::exists(source_dir / "metrics.csv")) {
        for (const auto& r : read_metrics_csv(source_dir / "metrics.csv")) {
          if (r.epoch <= state.epoch) previous_rows.push_back(r);
        }
      }
    }
    trainer.emplace(config.run, data.train, &data.test, std::move(state));
  } else {
    trainer.emplace(config.run, data.train, &data.test);
  }
  trainer->snapshots() = previous_snapshots;
  trainer->metrics() = previous_rows;

  const auto& boundaries = trainer->schedule().boundaries;
  const auto total = trainer->schedule().total_iterations;
  trainer->on_epoch_end([&](const TrainState<float>& state, const MetricsRecord& row) {
    if (config.verbose) std::cerr << format_metrics_row(row) << '\n';
    const bool boundary = std::binary_search(boundaries.begin(), boundaries.end(), state.iteration);
    if (config.checkpoints && (boundary || state.iteration == total)) {
      save_checkpoint(state, checkpoint_path(run_dir, state.iteration));
    }
  });

  auto result = trainer->run();
  write_metrics_csv(result.metrics, (run_dir / "metrics.csv").string());
  ExperimentOutcome outcome{run_dir, make_report(result, config.run, data.test), std::move(result)};
  std::ofstream summary(run_dir / "summary.txt", std::ios::trunc);
  summary << format_summary(outcome.report, config, config.run.seed);
  if (!summary) throw IoError("cannot write '" + (run_dir / "summary.txt").string() + "'");
  return outcome;
}

}  // namespace snapdistill
