#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "snapdistill/data.hpp"
#include "snapdistill/models.hpp"
#include "snapdistill/optim.hpp"
#include "snapdistill/schedule.hpp"

namespace snapdistill {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct SnapshotMeta {
  std::int64_t iteration = 0;
  std::int64_t epoch = 0;
  TrainMode mode = TrainMode::BL;
  std::uint64_t seed = 0;
  std::uint64_t schedule_hash = 0;
  std::uint32_t format_version = kCheckpointVersion;
};

/// Frozen copy of a model at one iteration. Shared as shared_ptr<const ...>.
template <typename Scalar>
struct Snapshot {
  ModelSpec spec;
  ParameterSet<Scalar> params;
  SnapshotMeta meta;

  Tensor<Scalar> logits(const Tensor<Scalar>& batch) const { return predict(spec, params, batch); }
};

template <typename Scalar>
using SnapshotPtr = std::shared_ptr<const Snapshot<Scalar>>;

template <typename Scalar>
SnapshotPtr<Scalar> make_snapshot(const Model<Scalar>& model, SnapshotMeta meta) {
  return std::make_shared<const Snapshot<Scalar>>(Snapshot<Scalar>{model.spec(), model.params(), meta});
}

/// Eval-mode forward closure over a frozen snapshot.
template <typename Scalar>
class TeacherHandle {
 public:
  TeacherHandle() = default;
  explicit TeacherHandle(SnapshotPtr<Scalar> snapshot) : snapshot_(std::move(snapshot)) {}

  explicit operator bool() const { return snapshot_ != nullptr; }
  std::int64_t iteration() const { return snapshot_->meta.iteration; }
  const Snapshot<Scalar>& snapshot() const { return *snapshot_; }
  const SnapshotPtr<Scalar>& shared() const { return snapshot_; }

  Tensor<Scalar> logits(const Tensor<Scalar>& batch) const { return snapshot_->logits(batch); }

 private:
  SnapshotPtr<Scalar> snapshot_;
};

template <typename Scalar>
TeacherHandle<Scalar> register_teacher(SnapshotPtr<Scalar> snapshot) {
  if (!snapshot) throw ContractViolation("register_teacher: empty snapshot");
  return TeacherHandle<Scalar>(std::move(snapshot));
}

/// Everything needed to continue a run bit-exactly.
template <typename Scalar>
struct TrainState {
  Model<Scalar> model;
  OptimizerState<Scalar> optimizer;
  std::int64_t iteration = 0;  // completed optimizer steps
  std::int64_t epoch = 0;      // completed epochs
  std::uint64_t data_seed = 0;
  Rng rng;
  TrainMode mode = TrainMode::BL;
  std::uint64_t schedule_hash = 0;
  TeacherHandle<Scalar> teacher;

  static TrainState initial(const ModelSpec& spec, std::uint64_t seed, SgdOptions sgd, TrainMode mode);

  SnapshotMeta meta() const { return {iteration, epoch, mode, data_seed, schedule_hash, kCheckpointVersion}; }
};

/// Binary checkpoint: magic "SDCKPT01", u32 version, u8 scalar width, model
/// descriptor, run meta, named tensors, optimizer options and buffers,
/// optional teacher snapshot, serialized RNG engine. Integers and IEEE-754
/// values are little-endian. Writes go to a temporary file that is renamed
/// into place.
template <typename Scalar>
void save_checkpoint(const TrainState<Scalar>& state, const std::filesystem::path& path);

/// Throws IoError, FormatError (bad magic, truncation, inconsistent contents)
/// or VersionError. Nothing is returned on failure.
template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path);

/// Snapshot view of a checkpoint (parameters and meta only).
template <typename Scalar>
SnapshotPtr<Scalar> load_snapshot(const std::filesystem::path& path);

/// runs/<run-id>/ckpt-<iter>.bin
std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::int64_t iteration);

struct ForkOptions {
  std::uint64_t new_seed = 0;
  /// Reset iteration/epoch to zero so the fork replays the whole schedule.
  bool restart_schedule = false;
  /// When set, the checkpoint's model must match.
  std::optional<ModelSpec> expected_spec;
};

/// Continues from a checkpoint's parameters under a fresh data/augmentation stream.
template <typename Scalar>
TrainState<Scalar> fork_run(const TrainState<Scalar>& checkpoint, const ForkOptions& options);

template <typename Scalar>
TrainState<Scalar> fork_run(const std::filesystem::path& checkpoint, const ForkOptions& options);

}  // namespace snapdistill
