#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "snapdistill/autodiff.hpp"

namespace snapdistill {

enum class ModelKind { Mlp, ResNet };

/// Architecture description. Serialized into checkpoints via descriptor().
struct ModelSpec {
  ModelKind kind = ModelKind::Mlp;
  // mlp: input width, hidden widths..., class count
  std::vector<Index> widths;
  // resnet
  int depth = 20;
  std::array<Index, 3> channels{16, 32, 64};
  Index in_channels = 3;
  Index image_size = 32;
  Index num_classes = 10;

  static ModelSpec mlp(std::vector<Index> widths);
  static ModelSpec resnet(int depth, Index num_classes, Index image_size = 32, Index in_channels = 3,
                          std::array<Index, 3> channels = {16, 32, 64});

  /// Residual blocks per stage, (depth - 2) / 6.
  int blocks_per_stage() const { return (depth - 2) / 6; }
  Index classes() const;
  /// Shape of one input sample: [D] for mlp, [C, H, W] for resnet.
  Shape sample_shape() const;

  void validate() const;

  /// Round-trippable text form, e.g. "mlp:16,32,4" or "resnet:8:c16,32,64:in3:s32:g10".
  std::string descriptor() const;
  static ModelSpec parse(const std::string& descriptor);

  /// Short names used on the command line: "resnet8", "resnet20", "mlp".
  static ModelSpec from_name(const std::string& name, Index num_classes, const Shape& sample_shape);

  bool operator==(const ModelSpec&) const = default;
};

enum class ParamRole : std::uint8_t { Weight, Bias, BnScale, BnShift, BnRunningMean, BnRunningVar };

inline bool is_trainable(ParamRole role) {
  return role != ParamRole::BnRunningMean && role != ParamRole::BnRunningVar;
}

template <typename Scalar>
struct Parameter {
  std::string name;
  ParamRole role;
  Tensor<Scalar> value;

  bool trainable() const { return is_trainable(role); }
};

/// Named tensors in a fixed registration order: learnable weights plus batch
/// norm running statistics.
template <typename Scalar>
class ParameterSet {
 public:
  std::size_t add(std::string name, ParamRole role, Tensor<Scalar> value);

  std::size_t size() const { return entries_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return entries_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return entries_[i]; }
  std::size_t index_of(const std::string& name) const;
  Tensor<Scalar>& at(const std::string& name) { return entries_[index_of(name)].value; }
  const Tensor<Scalar>& at(const std::string& name) const { return entries_[index_of(name)].value; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Number of scalar values in trainable entries.
  Index trainable_count() const;
  std::uint64_t checksum() const;
  bool identical(const ParameterSet& other) const;
  /// Euclidean distance over trainable entries.
  double distance(const ParameterSet& other) const;

  template <typename To>
  ParameterSet<To> cast() const {
    ParameterSet<To> out;
    for (const auto& p : entries_) out.add(p.name, p.role, p.value.template cast<To>());
    return out;
  }

 private:
  std::vector<Parameter<Scalar>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class ForwardMode { Train, Eval };

template <typename Scalar>
struct ForwardPass {
  Var<Scalar> logits;
  /// Graph node of each ParameterSet entry (running statistics map to constants).
  std::vector<NodeId> param_nodes;
};

/// A model: architecture plus its parameters.
template <typename Scalar>
class Model {
 public:
  Model(ModelSpec spec, ParameterSet<Scalar> params);

  const ModelSpec& spec() const { return spec_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  /// Records the forward pass on `graph`. Train mode normalizes with batch
  /// statistics and updates the running statistics in place; eval mode is
  /// read-only. Parameters become leaves requiring gradients iff `track_grad`.
  ForwardPass<Scalar> forward(Graph<Scalar>& graph, const Tensor<Scalar>& batch, ForwardMode mode,
                              bool track_grad = true);

  /// Eval-mode logits without gradient tracking.
  Tensor<Scalar> predict(const Tensor<Scalar>& batch) const;

  /// Batch-norm running statistics momentum.
  static constexpr double kBnMomentum = 0.1;

 private:
  ModelSpec spec_;
  ParameterSet<Scalar> params_;
};

/// Deterministic initialization from `seed`: He fan-in normal weights, zero
/// biases, unit BN scale, zero BN shift, running mean 0 and variance 1.
template <typename Scalar>
Model<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed);

/// Eval-mode forward of a const parameter set (used by frozen teachers).
template <typename Scalar>
Tensor<Scalar> predict(const ModelSpec& spec, const ParameterSet<Scalar>& params, const Tensor<Scalar>& batch);

}  // namespace snapdistill
