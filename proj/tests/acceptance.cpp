// Acceptance checks, one line per criterion. Exit status is nonzero if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "snapdistill/experiment.hpp"

using namespace snapdistill;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
  const auto start = std::chrono::steady_clock::now();
  Outcome r;
  try {
    r = check();
  } catch (const std::exception& e) {
    r = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!r.pass) ++failures;
  std::printf("[%s] %d %s: %s (%.2f s)\n", r.pass ? "PASS" : "FAIL", id, name, r.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome schedule_fidelity() {
  const auto b = partition_even(164, 4);
  const bool epochs_ok = b == std::vector<std::int64_t>{41, 82, 123};
  // 390 iterations per epoch keeps each segment even, so the midpoint is an iteration
  const auto c = ScheduleConfig::from_epochs(164, 390, 4, 0.1, 2.0, TrainMode::SD);
  double worst_mid = 0.0, worst_edge = 0.0;
  std::int64_t prev = 0;
  for (int k = 1; k <= 4; ++k) {
    const auto end = c.generation_end(k);
    const auto mid = prev + (end - prev) / 2;
    worst_mid = std::max(worst_mid, std::abs(learning_rate(mid, c) - 0.05));
    worst_edge = std::max(worst_edge, std::abs(learning_rate(end, c)));
    prev = end;
  }
  const double ulp = std::nextafter(0.05, 1.0) - 0.05;
  const bool ok = epochs_ok && worst_mid <= ulp && worst_edge <= ulp;
  return {ok, fmt("boundaries {%lld,%lld,%lld}; max |lr(mid) - 0.05| = %.3g, max |lr(boundary)| = %.3g (ulp %.3g)",
                  static_cast<long long>(b.at(0)), static_cast<long long>(b.at(1)), static_cast<long long>(b.at(2)),
                  worst_mid, worst_edge, ulp)};
}

Outcome teacher_index_oracle() {
  std::mt19937_64 rng(2024);
  int mismatches = 0, cases = 0;
  long checks = 0;
  for (; cases < 1000; ++cases) {
    const std::int64_t total = 1 + static_cast<std::int64_t>(rng() % 1000);
    const int k = 1 + static_cast<int>(rng() % std::min<std::int64_t>(7, total));
    const auto b = partition_even(total, k);
    for (std::int64_t l = 1; l <= total; ++l) {
      // literal max{L'_k : L'_k < l}, 0 when the set is empty
      std::int64_t scan = 0;
      for (auto x : b) {
        if (x < l && x > scan) scan = x;
      }
      mismatches += teacher_index(l, b).value_or(0) != scan;
      ++checks;
    }
  }
  return {mismatches == 0, fmt("%d random (L, K) cases, %ld iterations compared, %d mismatches", cases, checks,
                               mismatches)};
}

Outcome loss_degeneration() {
  SynthSpec s;
  s.classes = 20;
  s.superclasses = 4;
  s.per_class = 40;
  s.test_per_class = 5;
  const auto data = synth_pair(s);
  RunConfig base;
  base.model = ModelSpec::mlp({32, 64, 20});
  base.epochs = 8;  // 800 samples / 32 per batch = 25 iterations per epoch, 200 total
  base.batch_size = 32;
  base.seed = 7;

  auto trajectory = [&](TrainMode mode, int k, std::optional<double> lambda_t) {
    auto c = base;
    c.mode = mode;
    c.generations = k;
    c.lambda_t = lambda_t;
    Trainer<float> t(c, data.train, nullptr);
    std::vector<ParameterSet<float>> steps;
    std::vector<Index> order(static_cast<std::size_t>(data.train.size()));
    // drive single steps so every iterate is compared, not just epoch ends
    while (t.state().iteration < t.schedule().total_iterations) {
      const std::int64_t epoch = t.state().iteration / 25 + 1;
      Rng rng = epoch_rng(c.seed, epoch);
      const auto perm = shuffled_order(data.train.size(), rng);
      for (Index start = 0; start < data.train.size(); start += c.batch_size) {
        std::span<const Index> idx(perm.data() + start, static_cast<std::size_t>(c.batch_size));
        t.train_step(data.train.batch<float>(idx), data.train.batch_labels(idx));
        steps.push_back(t.state().model.params());
      }
    }
    return steps;
  };
  auto same = [](const auto& a, const auto& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].identical(b[i])) return false;
    }
    return true;
  };
  const auto sd0 = trajectory(TrainMode::SD, 4, 0.0);
  const auto se = trajectory(TrainMode::SE, 4, std::nullopt);
  const auto se1 = trajectory(TrainMode::SE, 1, std::nullopt);
  const auto bl = trajectory(TrainMode::BL, 1, std::nullopt);
  const auto sd = trajectory(TrainMode::SD, 4, std::nullopt);
  const bool a = same(sd0, se), b = same(se1, bl), control = !same(sd, se);
  return {a && b && control && sd0.size() == 200,
          fmt("%zu iterations; SD(lambda_t=0) == SE: %s; SE(K=1) == BL: %s; control SD(default) differs: %s",
              sd0.size(), a ? "bitwise" : "NO", b ? "bitwise" : "NO", control ? "yes" : "NO")};
}

Outcome gradient_correctness() {
  double worst = 0.0;
  int coords = 0;
  for (double t : {2.0, 3.0}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto model = build_model<double>(ModelSpec::mlp({6, 8, 5}), seed);
      std::mt19937_64 rng(seed + 100);
      std::normal_distribution<double> n01;
      Tensor<double> x({4, 6}), teacher({4, 5});
      for (Index i = 0; i < x.size(); ++i) x[i] = n01(rng);
      for (Index i = 0; i < teacher.size(); ++i) teacher[i] = 2.0 * n01(rng);
      std::vector<int> y(4);
      for (auto& v : y) v = static_cast<int>(rng() % 5);
      const LossWeights w{1 + 1 / t, 1.0};

      Graph<double> g;
      auto pass = model.forward(g, x, ForwardMode::Train);
      auto grads = backward(g, sd_loss(pass.logits, std::span<const int>(y), &teacher, w, t).total);
      auto loss_at = [&](const ParameterSet<double>& p) {
        Graph<double> g2;
        auto logits = g2.constant(predict(model.spec(), p, x));
        return sd_loss(logits, std::span<const int>(y), &teacher, w, t).total.value().item();
      };
      for (std::size_t i = 0; i < model.params().size(); ++i) {
        const auto& analytic = grads.at(pass.param_nodes[i]);
        for (Index j = 0; j < analytic.size(); ++j) {
          auto p = model.params();
          const double h = 1e-6, base = p[i].value[j];
          p[i].value[j] = base + h;
          const double up = loss_at(p);
          p[i].value[j] = base - h;
          const double down = loss_at(p);
          const double numeric = (up - down) / (2 * h);
          const double a = analytic[j];
          const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
          worst = std::max(worst, rel);
          ++coords;
        }
      }
    }
  }
  return {worst < 1e-4, fmt("max relative error %.3g over %d coordinates (T = 2, 3; 20 seeds; 4 x 5 MLP problem)",
                            worst, coords)};
}

Outcome asymmetry() {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n01;
  int differ = 0;
  double worst_t1 = 0.0;
  for (int d = 0; d < 1000; ++d) {
    Tensor<double> t({4, 10}), s({4, 10});
    for (Index i = 0; i < t.size(); ++i) t[i] = 3.0 * n01(rng);
    for (Index i = 0; i < s.size(); ++i) s[i] = 3.0 * n01(rng);
    Graph<double> g;
    auto sv = g.constant(s);
    const double a2 = kl_asymmetric(t, sv, 2.0).value().item();
    const double s2 = kl_symmetric(t, sv, 2.0).value().item();
    differ += std::abs(a2 - s2) > 1e-6;
    const double a1 = kl_asymmetric(t, sv, 1.0).value().item();
    const double s1 = kl_symmetric(t, sv, 1.0).value().item();
    worst_t1 = std::max(worst_t1, std::abs(a1 - s1));
  }
  return {differ >= 950 && worst_t1 <= 1e-9,
          fmt("T = 2: %d/1000 draws differ by > 1e-6; T = 1: max |difference| = %.3g", differ, worst_t1)};
}

Outcome resume_determinism() {
  SynthSpec s;
  s.classes = 10;
  s.superclasses = 2;
  s.per_class = 20;
  s.test_per_class = 4;
  s.sample_shape = {3, 16, 16};
  const auto data = synth_pair(s);
  RunConfig c;
  c.model = ModelSpec::resnet(8, 10, 16, 3);
  c.mode = TrainMode::SD;
  c.epochs = 8;
  c.generations = 4;
  c.batch_size = 32;
  c.seed = 5;

  Trainer<float> full(c, data.train, &data.test);
  full.run();

  const auto dir = std::filesystem::temp_directory_path() / "snapdistill_acceptance";
  std::filesystem::remove_all(dir);
  Trainer<float> first(c, data.train, &data.test);
  const auto boundary = first.schedule().boundaries.at(0);
  first.on_epoch_end([&](const TrainState<float>& st, const MetricsRecord&) {
    if (st.iteration == boundary) save_checkpoint(st, checkpoint_path(dir, boundary));
  });
  first.run_until(2);

  Trainer<float> resumed(c, data.train, &data.test, load_checkpoint<float>(checkpoint_path(dir, boundary)));
  resumed.snapshots().push_back(load_snapshot<float>(checkpoint_path(dir, boundary)));
  auto r = resumed.run();
  const bool params = r.model.params().identical(full.state().model.params());
  const bool optim = [&] {
    for (std::size_t i = 0; i < r.model.params().size(); ++i) {
      const auto &a = resumed.state().optimizer.momentum[i], &b = full.state().optimizer.momentum[i];
      if (a.empty() != b.empty() || (!a.empty() && !a.identical(b))) return false;
    }
    return true;
  }();
  bool snaps = r.snapshots.size() == full.snapshots().size();
  for (std::size_t k = 0; snaps && k < r.snapshots.size(); ++k) {
    snaps = r.snapshots[k]->params.identical(full.snapshots()[k]->params);
  }
  return {params && optim && snaps,
          fmt("ResNet8 SD run resumed at first boundary (iteration %lld) from disk; final parameters %s, momentum %s, snapshots %s "
              "(checksum %016llx)",
              static_cast<long long>(boundary), params ? "bit-identical" : "DIFFER", optim ? "identical" : "DIFFER",
              snaps ? "identical" : "DIFFER", static_cast<unsigned long long>(r.model.params().checksum()))};
}

Outcome directional_effect() {
  SynthSpec s;
  s.classes = 20;
  s.superclasses = 4;
  s.per_class = 200;
  s.test_per_class = 50;
  s.sample_shape = {32};
  s.label_noise = 0.2;
  const auto data = synth_pair(s);
  RunConfig c;
  c.model = ModelSpec::mlp({32, 128, 128, 20});
  c.epochs = 20;
  c.temperature = 2.0;

  double bl_sum = 0, sd_sum = 0;
  int wins = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= 7; ++seed) {
    c.seed = seed;
    c.mode = TrainMode::BL;
    c.generations = 1;
    const auto bl = train<float>(c, data.train, &data.test);
    c.mode = TrainMode::SD;
    c.generations = 4;
    const auto sd = train<float>(c, data.train, &data.test);
    const double e_bl = evaluate(bl.model.spec(), bl.model.params(), data.test).top1;
    const double e_sd = evaluate(sd.model.spec(), sd.model.params(), data.test).top1;
    bl_sum += e_bl;
    sd_sum += e_sd;
    wins += e_sd <= e_bl;
    per += fmt(" %.1f/%.1f", e_bl, e_sd);
  }
  return {sd_sum <= bl_sum, fmt("mean top-1 error BL %.2f%%, SD %.2f%% over 7 seeds (SD <= BL on %d); per seed BL/SD:%s",
                                bl_sum / 7, sd_sum / 7, wins, per.c_str())};
}

SnapshotPtr<double> identity_snapshot(Index g) {
  ParameterSet<double> p;
  Tensor<double> w({g, g});
  for (Index i = 0; i < g; ++i) w[i * g + i] = 1.0;
  p.add("fc1.weight", ParamRole::Weight, w);
  p.add("fc1.bias", ParamRole::Bias, Tensor<double>::zeros({g}));
  return std::make_shared<const Snapshot<double>>(Snapshot<double>{ModelSpec::mlp({g, g}), p, {}});
}

SnapshotPtr<double> offset_snapshot(const Tensor<double>& bias) {
  ParameterSet<double> p;
  p.add("fc1.weight", ParamRole::Weight, Tensor<double>::zeros({bias.size(), bias.size()}));
  p.add("fc1.bias", ParamRole::Bias, bias);
  return std::make_shared<const Snapshot<double>>(Snapshot<double>{ModelSpec::mlp({bias.size(), bias.size()}), p, {}});
}

Outcome ensemble_rule() {
  // snapshots output fixed logits z1, z2 regardless of input
  const Tensor<double> z1({3}, {1.0, 2.0, 0.5}), z2({3}, {0.3, -1.0, 2.0});
  std::vector<SnapshotPtr<double>> snaps{offset_snapshot(z1), offset_snapshot(z2)};
  const auto x = Tensor<double>::zeros({1, 3});

  auto softmax = [](std::vector<double> v) {
    double m = *std::max_element(v.begin(), v.end()), s = 0;
    for (auto& e : v) s += (e = std::exp(e - m));
    for (auto& e : v) e /= s;
    return v;
  };
  const auto a = softmax({1.0, 2.0, 0.5}), b = softmax({0.3, -1.0, 2.0}), b2 = softmax({0.6, -2.0, 4.0});
  const auto p1 = ensemble_predict<double>(snaps, x, 1.0);
  const auto p2 = ensemble_predict<double>(snaps, x, 2.0);
  double err1 = 0, err2 = 0;
  for (int i = 0; i < 3; ++i) {
    err1 = std::max(err1, std::abs(p1[i] - (a[i] + b[i]) / 2));
    err2 = std::max(err2, std::abs(p2[i] - (a[i] + b2[i]) / 2));
  }
  // identical members at T = 1 give back the single model
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  Tensor<double> probe({6, 4});
  for (Index i = 0; i < probe.size(); ++i) probe[i] = n01(rng);
  auto id = identity_snapshot(4);
  std::vector<SnapshotPtr<double>> same{id, id, id};
  const double err3 =
      (ensemble_predict<double>(same, probe, 1.0).values() - softmax_with_temperature(probe, 1.0).values())
          .abs()
          .maxCoeff();
  const bool ok = err1 < 1e-15 && err2 < 1e-15 && err3 < 1e-15;
  return {ok, fmt("T = 1 vs uniform softmax average: %.2g; T = 2 vs (softmax(z1) + softmax(2 z2)) / 2: %.2g; "
                  "identical members vs single model: %.2g",
                  err1, err2, err3)};
}

Outcome fork_machinery() {
  SynthSpec s;
  s.classes = 20;
  s.superclasses = 4;
  s.per_class = 40;
  s.test_per_class = 10;
  const auto data = synth_pair(s);
  RunConfig c;
  c.model = ModelSpec::mlp({32, 64, 20});
  c.mode = TrainMode::BL;
  c.generations = 1;
  c.epochs = 6;
  c.seed = 1;

  const auto dir = std::filesystem::temp_directory_path() / "snapdistill_acceptance_fork";
  std::filesystem::remove_all(dir);
  Trainer<float> line(c, data.train, &data.test);
  line.run_until(2);
  const auto ckpt = checkpoint_path(dir, line.state().iteration);
  save_checkpoint(line.state(), ckpt);

  // two forks of one checkpoint, different randomization
  Trainer<float> fa(c, data.train, &data.test, fork_run<float>(ckpt, ForkOptions{101, false, c.model}));
  Trainer<float> fb(c, data.train, &data.test, fork_run<float>(ckpt, ForkOptions{202, false, c.model}));
  const bool same_start = fa.state().model.params().identical(fb.state().model.params());
  fa.run_until(3);
  fb.run_until(3);
  const double dist = fa.state().model.params().distance(fb.state().model.params());

  // teacher = fork A finished; student = fresh run distilled from it with constant weights
  const auto teacher_run = fa.run();
  auto student_cfg = c;
  student_cfg.seed = 303;
  Trainer<float> student(student_cfg, data.train, &data.test);
  const ExternalTeacher<float> ext{register_teacher(teacher_run.snapshots.back()), 0, LossWeights{1.5, 1.0}, 2.0};
  student.set_external_teacher(ext);

  // one step by hand against the two-generation objective: lambda_s CE + lambda_t KL(teacher/T || student)
  std::vector<Index> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const auto xb = data.train.batch<float>(idx);
  const auto yb = data.train.batch_labels(idx);
  Model<float> probe = student.state().model;
  Graph<float> g;
  auto logits = probe.forward(g, xb, ForwardMode::Train).logits;
  const double expect = 1.5 * ce_loss(logits, std::span<const int>(yb)).value().item() +
                        kl_asymmetric(ext.handle.logits(xb), logits, 2.0f).value().item();
  const double got = student.train_step(xb, yb).loss.total;

  Trainer<float> fresh(student_cfg, data.train, &data.test);
  fresh.set_external_teacher(ext);
  const auto r = fresh.run();
  bool distilled = !r.metrics.empty();
  for (const auto& row : r.metrics) distilled = distilled && row.loss_kl > 0 && row.lambda_t == 1.0;
  const double err = r.metrics.empty() ? 100.0 : r.metrics.back().test_err;
  const bool ok = same_start && dist > 0 && std::abs(got - expect) <= 1e-5 * std::abs(expect) && distilled &&
                  std::isfinite(err) && err < 100.0;
  return {ok, fmt("forks start identical: %s; parameter distance after 1 epoch %.4g; external-teacher step loss %.7g "
                  "vs hand objective %.7g; student trained %zu epochs with KL active, test error %.2f%%",
                  same_start ? "yes" : "NO", dist, got, expect, r.metrics.size(), err)};
}

}  // namespace

int main() {
  report(1, "schedule fidelity", schedule_fidelity);
  report(2, "teacher index oracle", teacher_index_oracle);
  report(3, "loss degeneration", loss_degeneration);
  report(4, "gradient correctness", gradient_correctness);
  report(5, "asymmetric softening", asymmetry);
  report(6, "determinism and resume", resume_determinism);
  report(7, "directional distillation effect", directional_effect);
  report(8, "ensemble rule", ensemble_rule);
  report(9, "fork machinery", fork_machinery);
  std::printf("%d of 9 criteria passed\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
