#include "snapdistill/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "snapdistill/errors.hpp"

namespace snapdistill {

// ---------------------------------------------------------------------------
// Dataset

template <typename Scalar>
Tensor<Scalar> Dataset::batch(std::span<const Index> indices) const {
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor<Scalar> out(shape);
  const Index d = sample_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index row = indices[i];
    if (row < 0 || row >= size()) throw ContractViolation("batch: sample index out of range");
    out.values().segment(static_cast<Index>(i) * d, d) = features.segment(row * d, d).template cast<Scalar>();
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

void Dataset::validate() const {
  if (num_classes < 2) throw ContractViolation("dataset needs at least 2 classes");
  if (features.size() != size() * sample_size()) throw ContractViolation("dataset features do not match labels");
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ContractViolation("dataset label " + std::to_string(y) + " out of range");
  }
}

template Tensor<float> Dataset::batch(std::span<const Index>) const;
template Tensor<double> Dataset::batch(std::span<const Index>) const;

// ---------------------------------------------------------------------------
// Binary image records

Dataset load_small_images(const std::string& path, const ImageFormat& format, Split split) {
  if (format.channels <= 0 || format.height <= 0 || format.width <= 0 || format.num_classes < 2 ||
      format.num_classes > 256) {
    throw ConfigError("invalid image format descriptor");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const auto record = static_cast<std::size_t>(format.record_bytes());
  if (bytes.empty()) throw FormatError("dataset file '" + path + "' is empty", 0);
  if (bytes.size() % record != 0) {
    throw FormatError("dataset file '" + path + "' truncated: trailing partial record", bytes.size() / record * record);
  }
  const std::size_t n = bytes.size() / record;
  Dataset ds;
  ds.sample_shape = {format.channels, format.height, format.width};
  ds.num_classes = format.num_classes;
  ds.split = split;
  ds.labels.resize(n);
  const Index d = ds.sample_size();
  ds.features.resize(static_cast<Index>(n) * d);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t base = r * record;
    const int label = bytes[base];
    if (label >= format.num_classes) {
      throw FormatError("label " + std::to_string(label) + " >= class count " + std::to_string(format.num_classes) +
                            " in '" + path + "'",
                        base);
    }
    ds.labels[r] = label;
    for (Index j = 0; j < d; ++j) {
      ds.features[static_cast<Index>(r) * d + j] = static_cast<float>(bytes[base + 1 + static_cast<std::size_t>(j)]);
    }
  }
  return ds;
}

void save_small_images(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write dataset file '" + path + "'");
  const Index d = dataset.sample_size();
  std::vector<unsigned char> record(static_cast<std::size_t>(d + 1));
  for (Index r = 0; r < dataset.size(); ++r) {
    record[0] = static_cast<unsigned char>(dataset.labels[static_cast<std::size_t>(r)]);
    for (Index j = 0; j < d; ++j) {
      const float v = std::clamp(std::round(dataset.features[r * d + j]), 0.0f, 255.0f);
      record[static_cast<std::size_t>(j + 1)] = static_cast<unsigned char>(v);
    }
    out.write(reinterpret_cast<const char*>(record.data()), static_cast<std::streamsize>(record.size()));
  }
  if (!out) throw IoError("write failed for dataset file '" + path + "'");
}

ChannelStats channel_stats(const Dataset& dataset) {
  const Index channels = dataset.sample_shape.size() >= 2 ? dataset.sample_shape[0] : 1;
  const Index d = dataset.sample_size();
  const Index per_channel = d / channels;
  ChannelStats stats;
  stats.mean.assign(static_cast<std::size_t>(channels), 0.0);
  stats.stddev.assign(static_cast<std::size_t>(channels), 0.0);
  const double count = static_cast<double>(dataset.size() * per_channel);
  for (Index c = 0; c < channels; ++c) {
    double acc = 0;
    for (Index r = 0; r < dataset.size(); ++r)
      acc += dataset.features.segment(r * d + c * per_channel, per_channel).cast<double>().sum();
    const double mean = acc / count;
    double sq = 0;
    for (Index r = 0; r < dataset.size(); ++r)
      sq += (dataset.features.segment(r * d + c * per_channel, per_channel).cast<double>() - mean).square().sum();
    stats.mean[static_cast<std::size_t>(c)] = mean;
    stats.stddev[static_cast<std::size_t>(c)] = std::sqrt(sq / count);
  }
  return stats;
}

void normalize(Dataset& dataset, const ChannelStats& stats) {
  const auto channels = static_cast<Index>(stats.mean.size());
  const Index d = dataset.sample_size();
  const Index per_channel = d / channels;
  for (Index c = 0; c < channels; ++c) {
    const double mean = stats.mean[static_cast<std::size_t>(c)];
    const double sd = stats.stddev[static_cast<std::size_t>(c)];
    const double inv = sd > 0 ? 1.0 / sd : 1.0;
    for (Index r = 0; r < dataset.size(); ++r) {
      auto seg = dataset.features.segment(r * d + c * per_channel, per_channel);
      seg = ((seg.cast<double>() - mean) * inv).cast<float>();
    }
  }
}

DatasetPair load_image_pair(const std::string& train_path, const std::string& test_path, const ImageFormat& format) {
  DatasetPair pair{load_small_images(train_path, format, Split::Train), load_small_images(test_path, format, Split::Test)};
  const auto stats = channel_stats(pair.train);
  normalize(pair.train, stats);
  normalize(pair.test, stats);
  return pair;
}

// ---------------------------------------------------------------------------
// Synthetic mixture

void SynthSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic mixture needs at least 2 classes");
  if (per_class <= 0 || test_per_class < 0) throw ConfigError("synthetic mixture sample counts must be positive");
  if (!(separation > 0)) throw ConfigError("synthetic mixture separation must be positive");
  if (!(noise >= 0)) throw ConfigError("synthetic mixture noise must be non-negative");
  if (superclasses < 0 || (superclasses > 0 && classes % superclasses != 0)) {
    throw ConfigError("class count must be a multiple of the superclass count");
  }
  if (!(label_noise >= 0 && label_noise <= 1)) throw ConfigError("label noise must lie in [0, 1]");
  if (sample_shape.empty() || shape_size(sample_shape) <= 0) throw ConfigError("synthetic sample shape is empty");
}

Eigen::MatrixXd SynthSpec::class_means() const {
  validate();
  const Index d = shape_size(sample_shape);
  Rng rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double scale) {
    Eigen::VectorXd v(d);
    for (Index j = 0; j < d; ++j) v[j] = scale * unit(rng);
    return v;
  };
  Eigen::MatrixXd means(classes, d);
  if (superclasses == 0) {
    for (int k = 0; k < classes; ++k) means.row(k) = draw(separation).transpose();
    return means;
  }
  const int fine = classes / superclasses;
  for (int s = 0; s < superclasses; ++s) {
    const Eigen::VectorXd center = draw(separation);
    for (int f = 0; f < fine; ++f) means.row(s * fine + f) = (center + draw(separation * fine_spread)).transpose();
  }
  return means;
}

Dataset synth_mixture(const SynthSpec& spec, Split split) {
  const Eigen::MatrixXd means = spec.class_means();
  const Index per_class = split == Split::Train ? spec.per_class : spec.test_per_class;
  const Index d = shape_size(spec.sample_shape);
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(split) + 1u};
  Rng rng(seq);
  std::normal_distribution<double> unit(0.0, 1.0);

  Dataset ds;
  ds.sample_shape = spec.sample_shape;
  ds.num_classes = spec.classes;
  ds.split = split;
  const Index n = per_class * spec.classes;
  ds.features.resize(n * d);
  ds.labels.resize(static_cast<std::size_t>(n));
  // interleave classes so any prefix is roughly balanced
  for (Index i = 0; i < per_class; ++i) {
    for (int k = 0; k < spec.classes; ++k) {
      const Index r = i * spec.classes + k;
      for (Index j = 0; j < d; ++j) {
        ds.features[r * d + j] = static_cast<float>(means(k, j) + spec.noise * unit(rng));
      }
      ds.labels[static_cast<std::size_t>(r)] = k;
    }
  }
  if (split == Split::Train && spec.label_noise > 0) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (auto& y : ds.labels) {
      if (coin(rng) < spec.label_noise) y = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(spec.classes)));
    }
  }
  return ds;
}

DatasetPair synth_pair(const SynthSpec& spec) {
  return {synth_mixture(spec, Split::Train), synth_mixture(spec, Split::Test)};
}

// ---------------------------------------------------------------------------
// Sampling and augmentation

std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  if (n == 0) throw ContractViolation("uniform_below: empty range");
  static_assert(Rng::min() == 0 && Rng::max() == ~std::uint64_t{0});
  // values below 2^64 mod n would bias the low residues
  const std::uint64_t threshold = (0 - n) % n;
  std::uint64_t x = rng();
  while (x < threshold) x = rng();
  return x % n;
}

std::vector<Index> shuffled_order(Index n, Rng& rng) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

Rng epoch_rng(std::uint64_t seed, std::int64_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(static_cast<std::uint64_t>(epoch) >> 32)};
  return Rng(seq);
}

AugmentDraw draw_augment(Rng& rng, const AugmentOptions& options) {
  AugmentDraw d;
  d.dy = static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(2 * options.pad + 1)));
  d.dx = static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(2 * options.pad + 1)));
  d.flip = options.flip && (rng() & 1u) != 0;
  return d;
}

template <typename Scalar>
void apply_augment(const Scalar* sample, Scalar* out, Index channels, Index height, Index width,
                   const AugmentDraw& draw, const AugmentOptions& options) {
  auto reflect = [](Index i, Index n) {
    if (n == 1) return Index{0};
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = sample + c * height * width;
    Scalar* dst = out + c * height * width;
    for (Index y = 0; y < height; ++y) {
      Index sy = y + draw.dy - options.pad;
      for (Index x = 0; x < width; ++x) {
        const Index ox = draw.flip ? width - 1 - x : x;
        Index sx = x + draw.dx - options.pad;
        Scalar v = 0;
        if (sy >= 0 && sy < height && sx >= 0 && sx < width) {
          v = src[sy * width + sx];
        } else if (options.reflect) {
          v = src[reflect(sy, height) * width + reflect(sx, width)];
        }
        dst[y * width + ox] = v;
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> augment(const Tensor<Scalar>& batch, Rng& rng, const AugmentOptions& options) {
  if (batch.rank() != 4) return batch;
  Tensor<Scalar> out(batch.shape());
  const Index c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const Index stride = c * h * w;
  for (Index b = 0; b < batch.dim(0); ++b) {
    const AugmentDraw draw = draw_augment(rng, options);
    apply_augment(batch.data() + b * stride, out.data() + b * stride, c, h, w, draw, options);
  }
  return out;
}

template void apply_augment(const float*, float*, Index, Index, Index, const AugmentDraw&, const AugmentOptions&);
template void apply_augment(const double*, double*, Index, Index, Index, const AugmentDraw&, const AugmentOptions&);
template Tensor<float> augment(const Tensor<float>&, Rng&, const AugmentOptions&);
template Tensor<double> augment(const Tensor<double>&, Rng&, const AugmentOptions&);

}  // namespace snapdistill
