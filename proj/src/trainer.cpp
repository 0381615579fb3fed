#include "snapdistill/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace snapdistill {

// ---------------------------------------------------------------------------
// RunConfig

ScheduleConfig RunConfig::schedule(Index train_size) const {
  return ScheduleConfig::from_epochs(epochs, iterations_per_epoch(train_size), effective_generations(), alpha,
                                     temperature, mode);
}

void RunConfig::validate() const {
  model.validate();
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size <= 0) throw ConfigError("batch size must be positive");
  if (generations < 1) throw ConfigError("need at least one mini-generation (k >= 1)");
  if (mode == TrainMode::SD && generations < 2) {
    throw ConfigError("sd mode needs k >= 2: with a single mini-generation no teacher ever exists");
  }
  if (epochs > 0 && effective_generations() > epochs) {
    throw ConfigError("k = " + std::to_string(generations) + " mini-generations exceed " + std::to_string(epochs) +
                      " epochs");
  }
  if (!(alpha > 0)) throw ConfigError("alpha must be positive");
  if (!(temperature >= 1)) throw ConfigError("temperature must be >= 1");
  if (lambda_s && !(*lambda_s >= 0)) throw ConfigError("lambda-s must be non-negative");
  if (lambda_t && !(*lambda_t >= 0)) throw ConfigError("lambda-t must be non-negative");
  if (augment_options.pad < 0) throw ConfigError("augmentation padding must be non-negative");
  OptimizerState<float>{sgd, {}}.validate();
}

// ---------------------------------------------------------------------------
// Metrics

std::string format_metrics_row(const MetricsRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%lld,%s,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%lld",
                static_cast<long long>(r.epoch), static_cast<long long>(r.iteration), to_string(r.mode).c_str(),
                r.mini_gen, r.lr, r.lambda_s, r.lambda_t, r.loss_total, r.loss_ce, r.loss_kl, r.train_err, r.test_err,
                static_cast<long long>(r.teacher_iter));
  return buf;
}

void write_metrics_csv(const std::vector<MetricsRecord>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics file '" + path + "'");
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
  if (!out) throw IoError("write failed for metrics file '" + path + "'");
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

void check_data(const RunConfig& config, const Dataset& data, const char* which) {
  data.validate();
  if (data.sample_shape != config.model.sample_shape()) {
    throw ConfigError(std::string(which) + " samples have shape " + shape_string(data.sample_shape) +
                      " but the model expects " + shape_string(config.model.sample_shape()));
  }
  if (data.num_classes != config.model.classes()) {
    throw ConfigError(std::string(which) + " has " + std::to_string(data.num_classes) + " classes, model has " +
                      std::to_string(config.model.classes()));
  }
}

ScheduleConfig make_schedule(const RunConfig& config, const Dataset& train) {
  config.validate();
  if (train.size() == 0) throw ConfigError("training split is empty");
  if (config.epochs == 0) {
    ScheduleConfig empty;
    empty.mode = config.mode;
    empty.temperature = config.temperature;
    return empty;
  }
  auto schedule = config.schedule(train.size());
  schedule.validate();
  return schedule;
}

template <typename Scalar>
Index count_correct(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const Index n = logits.dim(0), classes = logits.dim(1);
  auto z = logits.matrix(n, classes);
  Index correct = 0;
  for (Index r = 0; r < n; ++r) {
    Index best = 0;
    z.row(r).maxCoeff(&best);
    correct += best == labels[static_cast<std::size_t>(r)];
  }
  return correct;
}

}  // namespace

template <typename Scalar>
Trainer<Scalar>::Trainer(RunConfig config, const Dataset& train, const Dataset* test)
    : Trainer(config, train, test, TrainState<Scalar>::initial(config.model, config.seed, config.sgd, config.mode)) {}

template <typename Scalar>
Trainer<Scalar>::Trainer(RunConfig config, const Dataset& train, const Dataset* test, TrainState<Scalar> state)
    : config_(std::move(config)),
      train_(train),
      test_(test),
      schedule_(make_schedule(config_, train)),
      state_(std::move(state)) {
  check_data(config_, train_, "training split");
  if (test_ != nullptr) check_data(config_, *test_, "test split");
  if (!(state_.model.spec() == config_.model)) {
    throw ConfigError("state model '" + state_.model.spec().descriptor() + "' does not match configured '" +
                      config_.model.descriptor() + "'");
  }
  if (state_.mode != config_.mode) {
    throw ConfigError("state was trained in mode " + to_string(state_.mode) + ", configured mode is " +
                      to_string(config_.mode));
  }
  if (state_.iteration > 0 && state_.schedule_hash != schedule_.hash()) {
    throw ConfigError("state was produced under a different schedule; refusing to resume");
  }
  if (state_.iteration > schedule_.total_iterations) throw ConfigError("state is past the end of the schedule");
  state_.schedule_hash = schedule_.hash();
}

template <typename Scalar>
LossWeights Trainer<Scalar>::weights_at(std::int64_t iteration) const {
  LossWeights w = loss_weights(iteration, schedule_);
  if (w.teacher == 0.0) return w;
  const double t = config_.lambda_t.value_or(w.teacher);
  // a zero teacher weight turns the objective back into plain cross-entropy
  const double s = config_.lambda_s.value_or(t == 0.0 ? 1.0 : w.student);
  return {s, t};
}

template <typename Scalar>
StepResult Trainer<Scalar>::train_step(const Tensor<Scalar>& batch, std::span<const int> labels) {
  if (state_.iteration >= schedule_.total_iterations) {
    throw ContractViolation("train_step: schedule already complete");
  }
  const std::int64_t l = state_.iteration + 1;
  LossWeights weights = weights_at(l);
  double temperature = config_.temperature;
  const TeacherHandle<Scalar>* teacher = nullptr;
  StepResult result;

  if (external_ && l > external_->start_iteration) {
    teacher = &external_->handle;
    weights = external_->weights;
    temperature = external_->temperature;
  } else if (config_.mode == TrainMode::SD) {
    const auto c = teacher_index(l, schedule_);
    if (c.has_value() != static_cast<bool>(state_.teacher) || (c && state_.teacher.iteration() != *c)) {
      throw ContractViolation("train_step: registered teacher does not match c_l at iteration " + std::to_string(l));
    }
    if (state_.teacher) teacher = &state_.teacher;
  }
  if (teacher != nullptr) result.teacher_iter = teacher->iteration();

  Graph<Scalar> graph;
  auto pass = state_.model.forward(graph, batch, ForwardMode::Train);
  std::optional<Tensor<Scalar>> teacher_logits;
  if (weights.teacher > 0.0) teacher_logits = teacher->logits(batch);
  auto loss = sd_loss(pass.logits, labels, teacher_logits ? &*teacher_logits : nullptr, weights,
                      static_cast<Scalar>(temperature));
  result.lr = learning_rate(l, schedule_);
  result.loss = loss.breakdown;

  auto diagnostic = [&](const std::string& what) {
    char buf[256];
    std::snprintf(buf, sizeof buf, " [iteration %lld, lr %.9g, ce %.9g, kl %.9g]", static_cast<long long>(l),
                  result.lr, result.loss.ce_term, result.loss.kl_term);
    return what + buf;
  };
  if (!std::isfinite(loss.breakdown.total)) throw NumericFailure(diagnostic("non-finite loss"), loss.total.id());

  GradientMap<Scalar> grads;
  try {
    grads = backward(graph, loss.total);
  } catch (const NumericFailure& e) {
    throw NumericFailure(diagnostic(e.what()), e.node());
  }
  std::vector<Tensor<Scalar>> aligned(state_.model.params().size());
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (state_.model.params()[i].trainable()) aligned[i] = std::move(grads.at(pass.param_nodes[i]));
  }
  sgd_step(state_.model.params(), aligned, state_.optimizer, static_cast<Scalar>(result.lr));
  result.correct = count_correct(pass.logits.value(), labels);
  state_.iteration = l;
  on_step_complete();
  return result;
}

template <typename Scalar>
void Trainer<Scalar>::on_step_complete() {
  const std::int64_t l = state_.iteration;
  const bool at_end = l == schedule_.total_iterations;
  const bool at_boundary =
      std::binary_search(schedule_.boundaries.begin(), schedule_.boundaries.end(), l);
  if (!at_end && !at_boundary) return;
  // snapshot after the final step of the mini-generation
  auto meta = state_.meta();
  const Index per_epoch = config_.iterations_per_epoch(train_.size());
  meta.epoch = (l + per_epoch - 1) / per_epoch;
  auto snapshot = make_snapshot(state_.model, meta);
  snapshots_.push_back(snapshot);
  if (config_.mode == TrainMode::SD && at_boundary) state_.teacher = register_teacher(std::move(snapshot));
}

template <typename Scalar>
MetricsRecord Trainer<Scalar>::run_epoch() {
  if (state_.epoch >= config_.epochs) throw ContractViolation("run_epoch: all epochs complete");
  const std::int64_t epoch = state_.epoch + 1;
  Rng rng = epoch_rng(state_.data_seed, epoch);
  const auto order = shuffled_order(train_.size(), rng);

  double total = 0, ce = 0, kl = 0;
  Index correct = 0;
  StepResult last;
  for (Index start = 0; start < train_.size(); start += config_.batch_size) {
    const Index end = std::min(train_.size(), start + config_.batch_size);
    std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(end - start));
    Tensor<Scalar> x = train_.template batch<Scalar>(idx);
    if (config_.augment && x.rank() == 4) x = augment(x, rng, config_.augment_options);
    const auto labels = train_.batch_labels(idx);
    last = train_step(x, labels);
    const double n = static_cast<double>(idx.size());
    total += last.loss.total * n;
    ce += last.loss.ce_term * n;
    kl += last.loss.kl_term * n;
    correct += last.correct;
  }
  state_.rng = rng;
  state_.epoch = epoch;

  const double n = static_cast<double>(train_.size());
  MetricsRecord r;
  r.epoch = epoch;
  r.iteration = state_.iteration;
  r.mode = config_.mode;
  r.mini_gen = mini_generation(state_.iteration, schedule_);
  r.lr = last.lr;
  r.lambda_s = last.loss.lambda_s;
  r.lambda_t = last.loss.lambda_t;
  r.loss_total = total / n;
  r.loss_ce = ce / n;
  r.loss_kl = kl / n;
  r.train_err = 100.0 * (1.0 - static_cast<double>(correct) / n);
  r.test_err = test_ != nullptr ? evaluate(state_.model.spec(), state_.model.params(), *test_).top1
                                : std::numeric_limits<double>::quiet_NaN();
  r.teacher_iter = last.teacher_iter;
  metrics_.push_back(r);
  if (on_epoch_end_) on_epoch_end_(state_, r);
  return r;
}

template <typename Scalar>
void Trainer<Scalar>::run_until(std::int64_t epoch) {
  while (state_.epoch < std::min<std::int64_t>(epoch, config_.epochs)) run_epoch();
}

template <typename Scalar>
TrainResult<Scalar> Trainer<Scalar>::run() {
  run_until(config_.epochs);
  return result();
}

template <typename Scalar>
TrainResult<Scalar> Trainer<Scalar>::result() const {
  TrainResult<Scalar> out{state_.model, snapshots_, metrics_, 0, 0.0};
  for (const auto& r : metrics_) {
    if (out.best_epoch == 0 || r.test_err < out.best_test_err) {
      out.best_epoch = r.epoch;
      out.best_test_err = r.test_err;
    }
  }
  return out;
}

template <typename Scalar>
TrainResult<Scalar> train(const RunConfig& config, const Dataset& train_split, const Dataset* test_split) {
  Trainer<Scalar> trainer(config, train_split, test_split);
  return trainer.run();
}

template class Trainer<float>;
template class Trainer<double>;
template TrainResult<float> train(const RunConfig&, const Dataset&, const Dataset*);
template TrainResult<double> train(const RunConfig&, const Dataset&, const Dataset*);

}  // namespace snapdistill
