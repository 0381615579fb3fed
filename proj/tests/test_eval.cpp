#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "test_util.hpp"

using namespace snapdistill;

namespace {

// top-k by explicit sort with the lower index winning ties
bool hit_oracle(const double* z, int g, int label, int k) {
  std::vector<int> order(static_cast<std::size_t>(g));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return z[a] > z[b]; });
  return std::find(order.begin(), order.begin() + k, label) != order.begin() + k;
}

SnapshotPtr<double> logit_snapshot(const Tensor<double>& logits_for_identity_input) {
  // one-layer mlp with identity weights so logits = input
  const Index g = logits_for_identity_input.dim(1);
  ParameterSet<double> p;
  Tensor<double> w({g, g});
  for (Index i = 0; i < g; ++i) w[i * g + i] = 1.0;
  p.add("fc1.weight", ParamRole::Weight, w);
  p.add("fc1.bias", ParamRole::Bias, Tensor<double>::zeros({g}));
  return std::make_shared<const Snapshot<double>>(Snapshot<double>{ModelSpec::mlp({g, g}), p, {}});
}

}  // namespace

TEST_CASE("closed form error rates") {
  const int g = 8, n = 80;
  Tensor<double> constant({n, g});
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = i % g;
    constant[i * g] = 1.0;
  }
  auto r = score_logits(constant, labels);
  CHECK(r.top1 == doctest::Approx(100.0 * (g - 1) / g));
  REQUIRE(r.top5.has_value());
  // all logits but class 0 tie, so classes 0..4 are the top five
  CHECK(*r.top5 == doctest::Approx(100.0 * 3 / 8));

  Tensor<double> perfect({n, g});
  for (int i = 0; i < n; ++i) perfect[i * g + labels[i]] = 10.0;
  CHECK(score_logits(perfect, labels).top1 == 0.0);
  CHECK(*score_logits(perfect, labels).top5 == 0.0);

  Tensor<double> small({2, 3}, {1, 0, 0, 0, 1, 0});
  std::vector<int> y{0, 0};
  auto s = score_logits(small, y);
  CHECK(s.top1 == 50.0);
  CHECK_FALSE(s.top5.has_value());

  Tensor<double> ties({1, 3}, {2, 2, 2});
  std::vector<int> y1{1};
  CHECK(score_logits(ties, y1).top1 == 100.0);
  std::vector<int> y0{0};
  CHECK(score_logits(ties, y0).top1 == 0.0);

  std::vector<int> none;
  CHECK_THROWS_AS(score_logits(Tensor<double>(), none), ContractViolation);
}

TEST_CASE("scoring matches a sorting oracle") {
  for (int s = 0; s < 20; ++s) {
    const int n = 100, g = 10;
    auto z = testutil::random_tensor({n, g}, s);
    // coarse rounding creates ties
    z.values() = (z.values() * 2).round();
    std::mt19937_64 rng(s);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng() % g);
    int miss1 = 0, miss5 = 0;
    for (int i = 0; i < n; ++i) {
      miss1 += !hit_oracle(z.data() + i * g, g, y[i], 1);
      miss5 += !hit_oracle(z.data() + i * g, g, y[i], 5);
    }
    auto r = score_logits(z, y);
    CHECK(r.top1 == doctest::Approx(miss1));
    CHECK(*r.top5 == doctest::Approx(miss5));
  }
}

TEST_CASE("ensemble probabilities") {
  Tensor<double> z1({1, 3}, {1.0, 2.0, 0.5});
  Tensor<double> z2({1, 3}, {0.3, -1.0, 2.0});
  std::vector<Tensor<double>> both{z1, z2};

  auto soft = [](std::vector<double> v) {
    double m = *std::max_element(v.begin(), v.end()), s = 0;
    for (auto& x : v) s += (x = std::exp(x - m));
    for (auto& x : v) x /= s;
    return v;
  };
  auto p1 = soft({1.0, 2.0, 0.5});
  auto p2 = soft({0.6, -2.0, 4.0});
  auto got = ensemble_probabilities<double>(both, 2.0);
  for (int i = 0; i < 3; ++i) CHECK(got[i] == doctest::Approx((p1[i] + p2[i]) / 2).epsilon(1e-14));

  auto q2 = soft({0.3, -1.0, 2.0});
  auto plain = ensemble_probabilities<double>(both, 1.0);
  for (int i = 0; i < 3; ++i) CHECK(plain[i] == doctest::Approx((p1[i] + q2[i]) / 2).epsilon(1e-14));

  // three members: the third is scaled by T^2
  std::vector<Tensor<double>> three{z1, z2, z1};
  auto p3 = soft({9.0, 18.0, 4.5});
  auto got3 = ensemble_probabilities<double>(three, 3.0);
  auto p2t3 = soft({0.9, -3.0, 6.0});
  for (int i = 0; i < 3; ++i) CHECK(got3[i] == doctest::Approx((p1[i] + p2t3[i] + p3[i]) / 3).epsilon(1e-14));
}

TEST_CASE("ensemble predict over snapshots") {
  auto x = testutil::random_tensor({5, 4}, 3);
  auto s = logit_snapshot(x);
  std::vector<SnapshotPtr<double>> same{s, s, s};
  auto avg = ensemble_predict<double>(same, x, 1.0);
  auto single = softmax_with_temperature(x, 1.0);
  CHECK((avg.values() - single.values()).abs().maxCoeff() < 1e-15);

  std::vector<SnapshotPtr<double>> one{s};
  CHECK_THROWS_AS(ensemble_predict<double>(one, x, 1.0), ContractViolation);
  auto other = std::make_shared<const Snapshot<double>>(
      Snapshot<double>{ModelSpec::mlp({4, 3, 4}), build_model<double>(ModelSpec::mlp({4, 3, 4}), 0).params(), {}});
  std::vector<SnapshotPtr<double>> mixed{s, other};
  CHECK_THROWS_AS(ensemble_predict<double>(mixed, x, 1.0), ConfigError);
}

TEST_CASE("evaluate agrees with scoring the predictions") {
  const auto data = fixtures::tiny_data();
  auto r = train<float>(fixtures::tiny_config(TrainMode::SE, 2, 4), data.train, &data.test);
  std::vector<Index> all(static_cast<std::size_t>(data.test.size()));
  std::iota(all.begin(), all.end(), 0);
  const auto logits = r.model.predict(data.test.batch<float>(all));
  auto direct = score_logits(logits, data.test.labels);
  for (Index batch : {1, 7, 256}) {
    auto e = evaluate(r.model.spec(), r.model.params(), data.test, batch);
    CHECK(e.top1 == direct.top1);
    CHECK(*e.top5 == *direct.top5);
  }
  CHECK(r.metrics.back().test_err == direct.top1);

  auto ens = evaluate_ensemble<float>(r.snapshots, data.test, 1.0f);
  std::vector<Tensor<float>> per;
  for (const auto& s : r.snapshots) per.push_back(s->logits(data.test.batch<float>(all)));
  CHECK(ens.top1 == score_logits(ensemble_probabilities<float>(per, 1.0f), data.test.labels).top1);

  Dataset empty = data.test;
  empty.labels.clear();
  empty.features.resize(0);
  CHECK_THROWS_AS(evaluate(r.model.spec(), r.model.params(), empty), ContractViolation);
}
