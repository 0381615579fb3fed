#include "snapdistill/models.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace snapdistill {

// ---------------------------------------------------------------------------
// ModelSpec

ModelSpec ModelSpec::mlp(std::vector<Index> widths) {
  ModelSpec spec;
  spec.kind = ModelKind::Mlp;
  spec.widths = std::move(widths);
  if (!spec.widths.empty()) spec.num_classes = spec.widths.back();
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::resnet(int depth, Index num_classes, Index image_size, Index in_channels,
                            std::array<Index, 3> channels) {
  ModelSpec spec;
  spec.kind = ModelKind::ResNet;
  spec.depth = depth;
  spec.num_classes = num_classes;
  spec.image_size = image_size;
  spec.in_channels = in_channels;
  spec.channels = channels;
  spec.validate();
  return spec;
}

Index ModelSpec::classes() const { return kind == ModelKind::Mlp ? widths.back() : num_classes; }

Shape ModelSpec::sample_shape() const {
  if (kind == ModelKind::Mlp) return {widths.front()};
  return {in_channels, image_size, image_size};
}

void ModelSpec::validate() const {
  if (kind == ModelKind::Mlp) {
    if (widths.size() < 2) throw ConfigError("mlp needs at least input and output widths");
    for (Index w : widths) {
      if (w <= 0) throw ConfigError("mlp widths must be positive");
    }
    if (widths.back() < 2) throw ConfigError("model needs at least 2 classes");
    return;
  }
  if (depth < 8 || (depth - 2) % 6 != 0) {
    throw ConfigError("resnet depth " + std::to_string(depth) + " invalid: (depth - 2) must be a positive multiple of 6");
  }
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (in_channels <= 0) throw ConfigError("resnet input channels must be positive");
  for (Index c : channels) {
    if (c <= 0) throw ConfigError("resnet channel plan must be positive");
  }
  if (image_size < 4 || image_size % 4 != 0) {
    throw ConfigError("resnet image size must be a positive multiple of 4 (two 2x2 poolings)");
  }
}

std::string ModelSpec::descriptor() const {
  std::ostringstream out;
  if (kind == ModelKind::Mlp) {
    out << "mlp:";
    for (std::size_t i = 0; i < widths.size(); ++i) out << (i ? "," : "") << widths[i];
  } else {
    out << "resnet:" << depth << ":c" << channels[0] << ',' << channels[1] << ',' << channels[2] << ":in"
        << in_channels << ":s" << image_size << ":g" << num_classes;
  }
  return out.str();
}

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  return parts;
}

Index parse_index(const std::string& text, const std::string& context) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw ConfigError("bad number '" + text + "' in " + context);
  }
}

}  // namespace

ModelSpec ModelSpec::parse(const std::string& descriptor) {
  const auto fields = split(descriptor, ':');
  if (fields.empty()) throw ConfigError("empty model descriptor");
  if (fields[0] == "mlp" && fields.size() == 2) {
    std::vector<Index> widths;
    for (const auto& w : split(fields[1], ',')) widths.push_back(parse_index(w, descriptor));
    return mlp(std::move(widths));
  }
  if (fields[0] == "resnet" && fields.size() == 6 && fields[2].starts_with("c") && fields[3].starts_with("in") &&
      fields[4].starts_with("s") && fields[5].starts_with("g")) {
    const auto ch = split(fields[2].substr(1), ',');
    if (ch.size() != 3) throw ConfigError("bad channel plan in model descriptor '" + descriptor + "'");
    return resnet(static_cast<int>(parse_index(fields[1], descriptor)), parse_index(fields[5].substr(1), descriptor),
                  parse_index(fields[4].substr(1), descriptor), parse_index(fields[3].substr(2), descriptor),
                  {parse_index(ch[0], descriptor), parse_index(ch[1], descriptor), parse_index(ch[2], descriptor)});
  }
  throw ConfigError("unrecognized model descriptor '" + descriptor + "'");
}

ModelSpec ModelSpec::from_name(const std::string& name, Index num_classes, const Shape& sample_shape) {
  if (name.starts_with("resnet")) {
    if (sample_shape.size() != 3 || sample_shape[1] != sample_shape[2]) {
      throw ConfigError("model '" + name + "' needs square [C, H, W] image samples, got " + shape_string(sample_shape));
    }
    const auto depth = static_cast<int>(parse_index(name.substr(6), "model name '" + name + "'"));
    return resnet(depth, num_classes, sample_shape[1], sample_shape[0]);
  }
  if (name == "mlp" || name.starts_with("mlp:")) {
    std::vector<Index> widths{shape_size(sample_shape)};
    if (name == "mlp") {
      widths.push_back(128);
      widths.push_back(128);
    } else {
      for (const auto& w : split(name.substr(4), ',')) widths.push_back(parse_index(w, "model name '" + name + "'"));
    }
    widths.push_back(num_classes);
    return mlp(std::move(widths));
  }
  return parse(name);
}

// ---------------------------------------------------------------------------
// ParameterSet

template <typename Scalar>
std::size_t ParameterSet<Scalar>::add(std::string name, ParamRole role, Tensor<Scalar> value) {
  if (index_.count(name) != 0) throw ContractViolation("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back(Parameter<Scalar>{std::move(name), role, std::move(value)});
  return entries_.size() - 1;
}

template <typename Scalar>
std::size_t ParameterSet<Scalar>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("no parameter named '" + name + "'");
  return it->second;
}

template <typename Scalar>
Index ParameterSet<Scalar>::trainable_count() const {
  Index n = 0;
  for (const auto& p : entries_) {
    if (p.trainable()) n += p.value.size();
  }
  return n;
}

template <typename Scalar>
std::uint64_t ParameterSet<Scalar>::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : entries_) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = snapdistill::checksum(p.value, h);
  }
  return h;
}

template <typename Scalar>
bool ParameterSet<Scalar>::identical(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || entries_[i].role != other.entries_[i].role ||
        !entries_[i].value.identical(other.entries_[i].value)) {
      return false;
    }
  }
  return true;
}

template <typename Scalar>
double ParameterSet<Scalar>::distance(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) throw ContractViolation("distance: parameter sets differ in layout");
  double acc = 0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].trainable()) continue;
    acc += (entries_[i].value.values() - other.entries_[i].value.values()).template cast<double>().square().sum();
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Construction

namespace {

template <typename Scalar>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<Scalar> he(Shape shape, Index fan_in) {
    Tensor<Scalar> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename Scalar>
void add_bn(ParameterSet<Scalar>& params, const std::string& prefix, Index channels) {
  params.add(prefix + ".weight", ParamRole::BnScale, Tensor<Scalar>::constant({channels}, Scalar(1)));
  params.add(prefix + ".bias", ParamRole::BnShift, Tensor<Scalar>::zeros({channels}));
  params.add(prefix + ".running_mean", ParamRole::BnRunningMean, Tensor<Scalar>::zeros({channels}));
  params.add(prefix + ".running_var", ParamRole::BnRunningVar, Tensor<Scalar>::constant({channels}, Scalar(1)));
}

template <typename Scalar>
void add_conv(ParameterSet<Scalar>& params, Initializer<Scalar>& init, const std::string& name, Index out, Index in,
              Index k) {
  params.add(name, ParamRole::Weight, init.he({out, in, k, k}, in * k * k));
}

std::string block_prefix(int stage, int block) {
  return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block + 1);
}

}  // namespace

template <typename Scalar>
Model<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Initializer<Scalar> init(seed);
  ParameterSet<Scalar> params;
  if (spec.kind == ModelKind::Mlp) {
    for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
      const Index in = spec.widths[i], out = spec.widths[i + 1];
      const std::string name = "fc" + std::to_string(i + 1);
      params.add(name + ".weight", ParamRole::Weight, init.he({out, in}, in));
      params.add(name + ".bias", ParamRole::Bias, Tensor<Scalar>::zeros({out}));
    }
    return Model<Scalar>(spec, std::move(params));
  }

  add_conv(params, init, "stem.conv.weight", spec.channels[0], spec.in_channels, 3);
  add_bn(params, "stem.bn", spec.channels[0]);
  Index in = spec.channels[0];
  for (int s = 0; s < 3; ++s) {
    const Index out = spec.channels[static_cast<std::size_t>(s)];
    for (int b = 0; b < spec.blocks_per_stage(); ++b) {
      const std::string p = block_prefix(s, b);
      add_conv(params, init, p + ".conv1.weight", out, in, 3);
      add_bn(params, p + ".bn1", out);
      add_conv(params, init, p + ".conv2.weight", out, out, 3);
      add_bn(params, p + ".bn2", out);
      if (in != out) add_conv(params, init, p + ".proj.weight", out, in, 1);
      in = out;
    }
  }
  params.add("fc.weight", ParamRole::Weight, init.he({spec.num_classes, in}, in));
  params.add("fc.bias", ParamRole::Bias, Tensor<Scalar>::zeros({spec.num_classes}));
  return Model<Scalar>(spec, std::move(params));
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename Scalar>
struct ForwardContext {
  Graph<Scalar>& graph;
  const ParameterSet<Scalar>& params;
  std::vector<NodeId> nodes;
  bool training;
  std::vector<std::pair<std::size_t, BatchStats<Scalar>>> bn_updates;

  Var<Scalar> param(const std::string& name) { return Var<Scalar>(&graph, nodes[params.index_of(name)]); }

  Var<Scalar> bn(Var<Scalar> x, const std::string& prefix) {
    BatchStats<Scalar> stats;
    auto y = batch_norm(x, param(prefix + ".weight"), param(prefix + ".bias"), params.at(prefix + ".running_mean"),
                        params.at(prefix + ".running_var"), training, Scalar(1e-5), training ? &stats : nullptr);
    if (training) bn_updates.emplace_back(params.index_of(prefix + ".running_mean"), std::move(stats));
    return y;
  }

  Var<Scalar> conv3(Var<Scalar> x, const std::string& name) { return conv2d(x, param(name), {1, 1}); }
};

template <typename Scalar>
ForwardPass<Scalar> forward_impl(Graph<Scalar>& graph, const ModelSpec& spec, const ParameterSet<Scalar>& params,
                                 const Tensor<Scalar>& batch, ForwardMode mode, bool track_grad,
                                 std::vector<std::pair<std::size_t, BatchStats<Scalar>>>* bn_updates) {
  const Shape sample = spec.sample_shape();
  if (batch.rank() < 1 || batch.size() != batch.dim(0) * shape_size(sample)) {
    throw ContractViolation("forward: batch " + shape_string(batch.shape()) + " does not match sample shape " +
                            shape_string(sample));
  }
  if (spec.kind == ModelKind::ResNet && batch.rank() != 4) {
    throw ContractViolation("forward: resnet expects [B, C, H, W], got " + shape_string(batch.shape()));
  }
  const Index n = batch.dim(0);

  ForwardContext<Scalar> ctx{graph, params, {}, mode == ForwardMode::Train, {}};
  ctx.nodes.reserve(params.size());
  for (const auto& p : params) ctx.nodes.push_back(graph.leaf(p.value, track_grad && p.trainable()).id());

  Var<Scalar> x = graph.constant(batch);
  if (spec.kind == ModelKind::Mlp) {
    Shape flat{n, sample[0]};
    if (batch.shape() != flat) x = reshape(x, flat);
    const std::size_t layers = spec.widths.size() - 1;
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string name = "fc" + std::to_string(i + 1);
      x = linear(x, ctx.param(name + ".weight"), ctx.param(name + ".bias"));
      if (i + 1 < layers) x = relu(x);
    }
  } else {
    x = relu(ctx.bn(ctx.conv3(x, "stem.conv.weight"), "stem.bn"));
    for (int s = 0; s < 3; ++s) {
      for (int b = 0; b < spec.blocks_per_stage(); ++b) {
        const std::string p = block_prefix(s, b);
        auto branch = relu(ctx.bn(ctx.conv3(x, p + ".conv1.weight"), p + ".bn1"));
        branch = ctx.bn(ctx.conv3(branch, p + ".conv2.weight"), p + ".bn2");
        auto shortcut = x;
        if (params.at(p + ".conv1.weight").dim(1) != params.at(p + ".conv1.weight").dim(0)) {
          shortcut = conv2d(x, ctx.param(p + ".proj.weight"), {1, 0});
        }
        x = relu(add(branch, shortcut));
      }
      if (s < 2) x = avg_pool2d(x, 2, 2);
    }
    x = linear(global_avg_pool(x), ctx.param("fc.weight"), ctx.param("fc.bias"));
  }
  if (bn_updates != nullptr) *bn_updates = std::move(ctx.bn_updates);
  return {x, std::move(ctx.nodes)};
}

}  // namespace

template <typename Scalar>
Model<Scalar>::Model(ModelSpec spec, ParameterSet<Scalar> params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
}

template <typename Scalar>
ForwardPass<Scalar> Model<Scalar>::forward(Graph<Scalar>& graph, const Tensor<Scalar>& batch, ForwardMode mode,
                                           bool track_grad) {
  std::vector<std::pair<std::size_t, BatchStats<Scalar>>> updates;
  auto pass = forward_impl(graph, spec_, params_, batch, mode, track_grad, &updates);
  const auto m = static_cast<Scalar>(kBnMomentum);
  for (auto& [mean_index, stats] : updates) {
    auto& mean = params_[mean_index].value.values();
    auto& var = params_[mean_index + 1].value.values();
    mean = (Scalar(1) - m) * mean + m * stats.mean.values();
    var = (Scalar(1) - m) * var + m * stats.unbiased_var.values();
  }
  return pass;
}

template <typename Scalar>
Tensor<Scalar> predict(const ModelSpec& spec, const ParameterSet<Scalar>& params, const Tensor<Scalar>& batch) {
  Graph<Scalar> graph;
  return forward_impl(graph, spec, params, batch, ForwardMode::Eval, false,
                      static_cast<std::vector<std::pair<std::size_t, BatchStats<Scalar>>>*>(nullptr)).logits.value();
}

template <typename Scalar>
Tensor<Scalar> Model<Scalar>::predict(const Tensor<Scalar>& batch) const {
  return snapdistill::predict(spec_, params_, batch);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Model<float>;
template class Model<double>;
template Model<float> build_model(const ModelSpec&, std::uint64_t);
template Model<double> build_model(const ModelSpec&, std::uint64_t);
template Tensor<float> predict(const ModelSpec&, const ParameterSet<float>&, const Tensor<float>&);
template Tensor<double> predict(const ModelSpec&, const ParameterSet<double>&, const Tensor<double>&);

}  // namespace snapdistill
