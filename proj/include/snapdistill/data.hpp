#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "snapdistill/tensor.hpp"

namespace snapdistill {

enum class Split : std::uint8_t { Train, Test };

/// Labeled samples stored as float features, one row per sample.
struct Dataset {
  Shape sample_shape;
  Eigen::ArrayXf features;
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::Train;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index sample_size() const { return shape_size(sample_shape); }

  /// Gathers rows into a [B, sample_shape...] tensor.
  template <typename Scalar>
  Tensor<Scalar> batch(std::span<const Index> indices) const;

  std::vector<int> batch_labels(std::span<const Index> indices) const;

  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// Record layout of small image files: per record one label byte followed by
/// C*H*W pixel bytes in channel-major order (CIFAR-10 binary layout).
struct ImageFormat {
  Index channels = 3;
  Index height = 32;
  Index width = 32;
  int num_classes = 10;

  Index record_bytes() const { return 1 + channels * height * width; }
};

/// Raw pixel values (0..255 as float). Throws IoError if the file cannot be
/// read and FormatError on truncation or out-of-range labels.
Dataset load_small_images(const std::string& path, const ImageFormat& format, Split split);

/// Inverse of load_small_images for byte-valued datasets (values are rounded
/// and clamped to 0..255).
void save_small_images(const Dataset& dataset, const std::string& path);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel mean and population standard deviation (channel = axis 0 of
/// the sample shape; a flat sample has a single channel).
ChannelStats channel_stats(const Dataset& dataset);
void normalize(Dataset& dataset, const ChannelStats& stats);

/// Loads both splits and normalizes each with statistics of the training split.
DatasetPair load_image_pair(const std::string& train_path, const std::string& test_path, const ImageFormat& format);

/// Gaussian mixture. With superclasses > 0 the class means cluster around
/// superclass centers, so classes within a superclass are mutually closer.
struct SynthSpec {
  int classes = 20;
  Index per_class = 200;
  Index test_per_class = 50;
  Shape sample_shape{32};
  double separation = 1.0;
  double noise = 1.0;
  int superclasses = 0;
  /// Spread of fine-class means around their superclass center, relative to separation.
  double fine_spread = 0.35;
  /// Fraction of training labels replaced by a uniformly drawn class.
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Class means, one row per class (pure function of the seed).
  Eigen::MatrixXd class_means() const;
};

Dataset synth_mixture(const SynthSpec& spec, Split split);
DatasetPair synth_pair(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// Sampling and augmentation

using Rng = std::mt19937_64;

/// Uniform integer in [0, n) by rejection sampling on the raw engine output.
std::uint64_t uniform_below(Rng& rng, std::uint64_t n);

/// Fisher-Yates permutation of 0..n-1.
std::vector<Index> shuffled_order(Index n, Rng& rng);

/// Per-epoch stream: a pure function of (seed, epoch).
Rng epoch_rng(std::uint64_t seed, std::int64_t epoch);

struct AugmentOptions {
  Index pad = 4;
  /// Mirror padding instead of zeros.
  bool reflect = false;
  bool flip = true;
};

struct AugmentDraw {
  Index dy = 0;
  Index dx = 0;
  bool flip = false;
};

/// Crop offsets uniform in [0, 2*pad], flip with probability 1/2.
AugmentDraw draw_augment(Rng& rng, const AugmentOptions& options);

/// Pad, crop back to the original size at the drawn offset, optionally flip
/// horizontally. `sample` is [C, H, W].
template <typename Scalar>
void apply_augment(const Scalar* sample, Scalar* out, Index channels, Index height, Index width,
                   const AugmentDraw& draw, const AugmentOptions& options);

/// Training-time augmentation of a [B, C, H, W] batch; one draw per sample.
/// Non-image batches are returned unchanged.
template <typename Scalar>
Tensor<Scalar> augment(const Tensor<Scalar>& batch, Rng& rng, const AugmentOptions& options);

}  // namespace snapdistill
