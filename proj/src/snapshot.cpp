#include "snapdistill/snapshot.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace snapdistill {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void string(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  template <typename Scalar>
  void tensor(const Tensor<Scalar>& t) {
    pod(static_cast<std::uint32_t>(t.empty() ? 0xffffffffu : t.shape().size()));
    if (t.empty()) return;
    for (Index d : t.shape()) pod(static_cast<std::int64_t>(d));
    for (Index i = 0; i < t.size(); ++i) pod(t[i]);
  }
  template <typename Scalar>
  void params(const ParameterSet<Scalar>& ps) {
    pod(static_cast<std::uint32_t>(ps.size()));
    for (const auto& p : ps) {
      string(p.name);
      pod(static_cast<std::uint8_t>(p.role));
      tensor(p.value);
    }
  }
  void meta(const SnapshotMeta& m) {
    pod(m.iteration);
    pod(m.epoch);
    pod(static_cast<std::uint8_t>(m.mode));
    pod(m.seed);
    pod(m.schedule_hash);
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string path) : buf_(std::move(bytes)), path_(std::move(path)) {}

  template <typename T>
  T pod() {
    need(sizeof(T), "value");
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  std::string string() {
    const auto n = pod<std::uint32_t>();
    need(n, "string");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void expect(const void* data, std::size_t n, const char* what) {
    need(n, what);
    if (std::memcmp(buf_.data() + pos_, data, n) != 0) fail(std::string("bad ") + what);
    pos_ += n;
  }
  template <typename Scalar>
  Tensor<Scalar> tensor() {
    const auto rank = pod<std::uint32_t>();
    if (rank == 0xffffffffu) return Tensor<Scalar>();
    if (rank > 8) fail("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      d = static_cast<Index>(pod<std::int64_t>());
      if (d <= 0) fail("non-positive tensor dimension");
    }
    const Index n = shape_size(shape);
    need(static_cast<std::size_t>(n) * sizeof(Scalar), "tensor values");
    Tensor<Scalar> t(shape);
    for (Index i = 0; i < n; ++i) t[i] = pod<Scalar>();
    return t;
  }
  template <typename Scalar>
  ParameterSet<Scalar> params() {
    ParameterSet<Scalar> ps;
    const auto n = pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto name = string();
      const auto role = pod<std::uint8_t>();
      if (role > static_cast<std::uint8_t>(ParamRole::BnRunningVar)) fail("unknown parameter role");
      auto value = tensor<Scalar>();
      try {
        ps.add(std::move(name), static_cast<ParamRole>(role), std::move(value));
      } catch (const ContractViolation& e) {
        fail(e.what());
      }
    }
    return ps;
  }
  SnapshotMeta meta() {
    SnapshotMeta m;
    m.iteration = pod<std::int64_t>();
    m.epoch = pod<std::int64_t>();
    const auto mode = pod<std::uint8_t>();
    if (mode > static_cast<std::uint8_t>(TrainMode::SD)) fail("unknown training mode");
    m.mode = static_cast<TrainMode>(mode);
    m.seed = pod<std::uint64_t>();
    m.schedule_hash = pod<std::uint64_t>();
    return m;
  }
  bool done() const { return pos_ == buf_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint '" + path_ + "': " + what, pos_);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename Scalar>
ModelSpec read_header(Reader& r, const std::filesystem::path& path) {
  r.expect(kMagic, sizeof kMagic, "magic bytes");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint '" + path.string() + "' has format version " + std::to_string(version) +
                       ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto width = r.pod<std::uint8_t>();
  if (width != sizeof(Scalar)) {
    r.fail("scalar width " + std::to_string(width) + " does not match requested " + std::to_string(sizeof(Scalar)));
  }
  try {
    return ModelSpec::parse(r.string());
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
}

}  // namespace

template <typename Scalar>
TrainState<Scalar> TrainState<Scalar>::initial(const ModelSpec& spec, std::uint64_t seed, SgdOptions sgd,
                                               TrainMode mode) {
  auto model = build_model<Scalar>(spec, seed);
  auto optimizer = OptimizerState<Scalar>::zeros_like(model.params(), sgd);
  return TrainState{std::move(model), std::move(optimizer), 0, 0, seed, epoch_rng(seed, 0), mode, 0, {}};
}

template <typename Scalar>
void save_checkpoint(const TrainState<Scalar>& state, const std::filesystem::path& path) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint8_t>(sizeof(Scalar)));
  w.string(state.model.spec().descriptor());
  w.meta(state.meta());
  w.params(state.model.params());

  w.pod(state.optimizer.options.momentum);
  w.pod(state.optimizer.options.weight_decay);
  w.pod(static_cast<std::uint8_t>(state.optimizer.options.decay_bn));
  w.pod(static_cast<std::uint32_t>(state.optimizer.momentum.size()));
  for (const auto& m : state.optimizer.momentum) w.tensor(m);

  w.pod(static_cast<std::uint8_t>(state.teacher ? 1 : 0));
  if (state.teacher) {
    const auto& snap = state.teacher.snapshot();
    w.string(snap.spec.descriptor());
    w.meta(snap.meta);
    w.params(snap.params);
  }

  std::ostringstream rng;
  rng << state.rng;
  w.string(rng.str());

  if (path.has_parent_path()) {
    std::error_code dir_ec;
    std::filesystem::create_directories(path.parent_path(), dir_ec);
    if (dir_ec) throw IoError("cannot create directory for checkpoint '" + path.string() + "': " + dir_ec.message());
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw IoError("write failed for checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  const ModelSpec spec = read_header<Scalar>(r, path);
  const SnapshotMeta meta = r.meta();
  auto params = r.template params<Scalar>();

  // the parameter layout must be exactly what the descriptor builds
  const auto reference = build_model<Scalar>(spec, 0);
  if (reference.params().size() != params.size()) r.fail("parameter count does not match model descriptor");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (reference.params()[i].name != params[i].name || reference.params()[i].value.shape() != params[i].value.shape()) {
      r.fail("parameter '" + params[i].name + "' does not match model descriptor");
    }
  }

  OptimizerState<Scalar> opt;
  opt.options.momentum = r.template pod<double>();
  opt.options.weight_decay = r.template pod<double>();
  opt.options.decay_bn = r.template pod<std::uint8_t>() != 0;
  const auto buffers = r.template pod<std::uint32_t>();
  if (buffers != params.size()) r.fail("momentum buffer count does not match parameters");
  for (std::uint32_t i = 0; i < buffers; ++i) {
    auto t = r.template tensor<Scalar>();
    const bool expected = params[i].trainable();
    if (expected ? t.shape() != params[i].value.shape() : !t.empty()) r.fail("momentum buffer shape mismatch");
    opt.momentum.push_back(std::move(t));
  }

  TeacherHandle<Scalar> teacher;
  if (r.template pod<std::uint8_t>() != 0) {
    ModelSpec tspec;
    try {
      tspec = ModelSpec::parse(r.string());
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
    const auto tmeta = r.meta();
    auto tparams = r.template params<Scalar>();
    teacher = register_teacher<Scalar>(
        std::make_shared<const Snapshot<Scalar>>(Snapshot<Scalar>{tspec, std::move(tparams), tmeta}));
  }

  Rng rng;
  std::istringstream rng_text(r.string());
  rng_text >> rng;
  if (rng_text.fail()) r.fail("unreadable RNG state");
  if (!r.done()) r.fail("trailing bytes");

  TrainState<Scalar> state{Model<Scalar>(spec, std::move(params)), std::move(opt), meta.iteration, meta.epoch,
                           meta.seed, rng, meta.mode, meta.schedule_hash, std::move(teacher)};
  try {
    state.optimizer.validate();
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  return state;
}

template <typename Scalar>
SnapshotPtr<Scalar> load_snapshot(const std::filesystem::path& path) {
  auto state = load_checkpoint<Scalar>(path);
  return make_snapshot(state.model, state.meta());
}

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::int64_t iteration) {
  return run_dir / ("ckpt-" + std::to_string(iteration) + ".bin");
}

template <typename Scalar>
TrainState<Scalar> fork_run(const TrainState<Scalar>& checkpoint, const ForkOptions& options) {
  if (options.expected_spec && !(*options.expected_spec == checkpoint.model.spec())) {
    throw ConfigError("fork: checkpoint model '" + checkpoint.model.spec().descriptor() + "' does not match '" +
                      options.expected_spec->descriptor() + "'");
  }
  TrainState<Scalar> fork = checkpoint;
  fork.data_seed = options.new_seed;
  fork.rng = epoch_rng(options.new_seed, fork.epoch);
  if (options.restart_schedule) {
    fork.iteration = 0;
    fork.epoch = 0;
    fork.teacher = {};
    fork.optimizer = OptimizerState<Scalar>::zeros_like(fork.model.params(), fork.optimizer.options);
  }
  return fork;
}

template <typename Scalar>
TrainState<Scalar> fork_run(const std::filesystem::path& checkpoint, const ForkOptions& options) {
  return fork_run(load_checkpoint<Scalar>(checkpoint), options);
}

#define SNAPDISTILL_INSTANTIATE(S)                                                     \
  template struct TrainState<S>;                                                       \
  template void save_checkpoint(const TrainState<S>&, const std::filesystem::path&);   \
  template TrainState<S> load_checkpoint(const std::filesystem::path&);                \
  template SnapshotPtr<S> load_snapshot(const std::filesystem::path&);                 \
  template TrainState<S> fork_run(const TrainState<S>&, const ForkOptions&);           \
  template TrainState<S> fork_run(const std::filesystem::path&, const ForkOptions&);

SNAPDISTILL_INSTANTIATE(float)
SNAPDISTILL_INSTANTIATE(double)

#undef SNAPDISTILL_INSTANTIATE

}  // namespace snapdistill
