#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "snapdistill/data.hpp"
#include "snapdistill/eval.hpp"
#include "snapdistill/losses.hpp"
#include "snapdistill/schedule.hpp"
#include "snapdistill/snapshot.hpp"

namespace snapdistill {

struct RunConfig {
  ModelSpec model;
  TrainMode mode = TrainMode::SD;
  int epochs = 20;
  Index batch_size = 64;
  int generations = 4;  // K; forced to 1 in BL mode
  double alpha = 0.1;
  double temperature = 2.0;
  SgdOptions sgd;
  /// Replace the (1 + 1/T, 1) weights while a teacher is active.
  std::optional<double> lambda_s;
  std::optional<double> lambda_t;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentOptions augment_options;

  int effective_generations() const { return mode == TrainMode::BL ? 1 : generations; }
  Index iterations_per_epoch(Index train_size) const { return (train_size + batch_size - 1) / batch_size; }
  ScheduleConfig schedule(Index train_size) const;
  void validate() const;
};

/// One row of the metrics CSV.
struct MetricsRecord {
  std::int64_t epoch = 0;
  std::int64_t iteration = 0;
  TrainMode mode = TrainMode::BL;
  int mini_gen = 1;
  double lr = 0.0;
  double lambda_s = 1.0;
  double lambda_t = 0.0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_kl = 0.0;
  double train_err = 0.0;
  double test_err = 0.0;
  std::int64_t teacher_iter = 0;  // 0 when no teacher
};

inline constexpr const char* kMetricsHeader =
    "epoch,iter,mode,mini_gen,lr,lambda_s,lambda_t,loss_total,loss_ce,loss_kl,train_err,test_err,teacher_iter";

/// CSV line (no newline); reals printed with 9 significant digits.
std::string format_metrics_row(const MetricsRecord& record);
void write_metrics_csv(const std::vector<MetricsRecord>& rows, const std::string& path);

struct StepResult {
  LossBreakdown loss;
  double lr = 0.0;
  Index correct = 0;
  std::int64_t teacher_iter = 0;
};

template <typename Scalar>
struct TrainResult {
  Model<Scalar> model;
  /// End-of-mini-generation snapshots M_{#L_1} .. M_{#L_K}.
  std::vector<SnapshotPtr<Scalar>> snapshots;
  std::vector<MetricsRecord> metrics;
  std::int64_t best_epoch = 0;
  double best_test_err = 0.0;
};

/// Fixed external teacher for classic two-generation teacher-student training.
template <typename Scalar>
struct ExternalTeacher {
  TeacherHandle<Scalar> handle;
  /// Distill only for iterations l > start_iteration.
  std::int64_t start_iteration = 0;
  LossWeights weights{1.5, 1.0};
  double temperature = 2.0;
};

/// Drives BL/SE/SD training over one dataset.
template <typename Scalar>
class Trainer {
 public:
  using EpochCallback = std::function<void(const TrainState<Scalar>&, const MetricsRecord&)>;

  Trainer(RunConfig config, const Dataset& train, const Dataset* test);
  /// Continue from an existing state (resume or fork).
  Trainer(RunConfig config, const Dataset& train, const Dataset* test, TrainState<Scalar> state);

  const RunConfig& config() const { return config_; }
  const ScheduleConfig& schedule() const { return schedule_; }
  TrainState<Scalar>& state() { return state_; }
  const TrainState<Scalar>& state() const { return state_; }

  /// Snapshots taken at mini-generation ends so far (seed with earlier ones on resume).
  std::vector<SnapshotPtr<Scalar>>& snapshots() { return snapshots_; }
  std::vector<MetricsRecord>& metrics() { return metrics_; }

  void set_external_teacher(ExternalTeacher<Scalar> teacher) { external_ = std::move(teacher); }
  void on_epoch_end(EpochCallback callback) { on_epoch_end_ = std::move(callback); }

  /// Loss weights for iteration l after overrides.
  LossWeights weights_at(std::int64_t iteration) const;

  /// One optimizer step on an (already augmented) batch; advances l by one.
  StepResult train_step(const Tensor<Scalar>& batch, std::span<const int> labels);

  MetricsRecord run_epoch();
  /// Runs the remaining epochs.
  TrainResult<Scalar> run();
  /// Runs until `epoch` epochs are complete (or the configured end).
  void run_until(std::int64_t epoch);

  TrainResult<Scalar> result() const;

 private:
  void on_step_complete();

  RunConfig config_;
  const Dataset& train_;
  const Dataset* test_;
  ScheduleConfig schedule_;
  TrainState<Scalar> state_;
  std::optional<ExternalTeacher<Scalar>> external_;
  std::vector<SnapshotPtr<Scalar>> snapshots_;
  std::vector<MetricsRecord> metrics_;
  EpochCallback on_epoch_end_;
};

template <typename Scalar>
TrainResult<Scalar> train(const RunConfig& config, const Dataset& train_split, const Dataset* test_split);

}  // namespace snapdistill
