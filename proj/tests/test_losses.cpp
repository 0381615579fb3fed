#include <doctest.h>

#include <cmath>
#include <random>
#include <span>

#include "snapdistill/gradcheck.hpp"
#include "snapdistill/losses.hpp"
#include "test_util.hpp"

using namespace snapdistill;
using testutil::random_tensor;

namespace {

double log_sum_exp(const double* z, int n, double t) {
  double m = z[0] / t;
  for (int i = 1; i < n; ++i) m = std::max(m, z[i] / t);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(z[i] / t - m);
  return m + std::log(s);
}

// KL(softmax(t / tt) || softmax(s / ts)) averaged over rows, computed directly
double kl_oracle(const Tensor<double>& teacher, const Tensor<double>& student, double tt, double ts) {
  const int b = static_cast<int>(teacher.dim(0)), g = static_cast<int>(teacher.dim(1));
  double total = 0.0;
  for (int r = 0; r < b; ++r) {
    const double* zt = teacher.data() + r * g;
    const double* zs = student.data() + r * g;
    const double lt = log_sum_exp(zt, g, tt), ls = log_sum_exp(zs, g, ts);
    for (int i = 0; i < g; ++i) {
      const double lp = zt[i] / tt - lt, lq = zs[i] / ts - ls;
      total += std::exp(lp) * (lp - lq);
    }
  }
  return total / b;
}

}  // namespace

TEST_CASE("cross entropy examples") {
  Graph<double> g;
  std::vector<int> labels{0, 3};
  auto uniform = ce_loss(g.constant(Tensor<double>::zeros({2, 4})), labels);
  CHECK(uniform.value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));

  Tensor<double> sure({1, 3}, {60.0, 0.0, 0.0});
  std::vector<int> zero{0};
  CHECK(ce_loss(g.constant(sure), zero).value().item() < 1e-20);

  auto z = random_tensor({3, 5}, 4, 2.0);
  std::vector<int> y{4, 0, 2};
  double expect = 0.0;
  for (int r = 0; r < 3; ++r) expect += -(z[r * 5 + y[r]] - log_sum_exp(z.data() + r * 5, 5, 1.0));
  CHECK(ce_loss(g.constant(z), y).value().item() == doctest::Approx(expect / 3).epsilon(1e-14));

  std::vector<int> bad{0, 5, 1};
  CHECK_THROWS_AS(ce_loss(g.constant(z), bad), ContractViolation);
  std::vector<int> negative{0, -1, 1};
  CHECK_THROWS_AS(ce_loss(g.constant(z), negative), ContractViolation);
  std::vector<int> short_labels{0};
  CHECK_THROWS_AS(ce_loss(g.constant(z), short_labels), ContractViolation);
}

TEST_CASE("asymmetric kl closed forms") {
  Graph<double> g;
  auto z = random_tensor({4, 6}, 9);
  CHECK(std::abs(kl_asymmetric(z, g.constant(z), 1.0).value().item()) < 1e-15);

  Tensor<double> teacher({1, 2}, {2.0, 0.0});
  auto student = g.constant(Tensor<double>::zeros({1, 2}));
  const double p = 1.0 / (1.0 + std::exp(-1.0));
  const double closed = p * std::log(2 * p) + (1 - p) * std::log(2 * (1 - p));
  CHECK(kl_asymmetric(teacher, student, 2.0).value().item() == doctest::Approx(closed).epsilon(1e-14));

  std::mt19937_64 rng(5);
  for (int s = 0; s < 200; ++s) {
    auto t = random_tensor({3, 7}, rng(), 3.0), st = random_tensor({3, 7}, rng(), 3.0);
    for (double temp : {1.0, 2.0, 3.0}) {
      const double v = kl_asymmetric(t, g.constant(st), temp).value().item();
      CHECK(v >= -1e-14);
      CHECK(v == doctest::Approx(kl_oracle(t, st, temp, 1.0)).epsilon(1e-12));
      CHECK(kl_symmetric(t, g.constant(st), temp).value().item() ==
            doctest::Approx(kl_oracle(t, st, temp, temp)).epsilon(1e-12));
    }
  }
}

TEST_CASE("teacher receives no gradient") {
  Graph<double> g;
  auto t = g.leaf(random_tensor({3, 4}, 1));
  auto s = g.leaf(random_tensor({3, 4}, 2));
  auto grads = backward(g, kl_asymmetric(t, s, 2.0));
  CHECK(grads.at(t.id()).values().isZero());
  CHECK_FALSE(grads.at(s.id()).values().isZero());
}

TEST_CASE("sd loss combination") {
  auto z = random_tensor({4, 5}, 21, 2.0);
  std::vector<int> y{1, 0, 4, 2};

  SUBCASE("(1, 0) is bitwise cross entropy") {
    Graph<double> g1, g2;
    auto plain = ce_loss(g1.constant(z), y).value().item();
    auto sd = sd_loss<double>(g2.constant(z), y, nullptr, LossWeights{1.0, 0.0}, 2.0);
    CHECK(sd.total.value().item() == plain);
    CHECK(sd.breakdown.kl_term == 0.0);
  }

  SUBCASE("self teacher adds a positive kl") {
    Graph<double> g;
    auto out = sd_loss(g.constant(z), y, &z, LossWeights{1.5, 1.0}, 2.0);
    const auto& b = out.breakdown;
    CHECK(b.kl_term > 0.0);
    CHECK(b.total > 1.5 * b.ce_term);
    CHECK(std::abs(b.total - (b.lambda_s * b.ce_term + b.lambda_t * b.kl_term)) < 1e-12);
    CHECK(out.total.value().item() == b.total);
    CHECK(b.kl_term == doctest::Approx(kl_oracle(z, z, 2.0, 1.0)).epsilon(1e-12));
  }

  SUBCASE("missing teacher") {
    Graph<double> g;
    CHECK_THROWS_AS(sd_loss<double>(g.constant(z), y, nullptr, LossWeights{1.5, 1.0}, 2.0), ContractViolation);
  }

  SUBCASE("gradient is linear in lambda_t") {
    auto teacher = random_tensor({4, 5}, 22, 2.0);
    auto grad_at = [&](double lt) {
      Graph<double> g;
      auto s = g.leaf(z);
      return backward(g, sd_loss(s, y, &teacher, LossWeights{1.0, lt}, 2.0).total).at(s.id());
    };
    auto g0 = grad_at(0.0), g1 = grad_at(1.0), g3 = grad_at(3.0);
    auto kl1 = g1.values() - g0.values(), kl3 = g3.values() - g0.values();
    CHECK((kl3 - 3.0 * kl1).abs().maxCoeff() < 1e-14);
  }

  SUBCASE("finite differences") {
    auto teacher = random_tensor({4, 5}, 23, 2.0);
    for (double t : {2.0, 3.0}) {
      auto err = check_gradients(
          [&](Graph<double>&, Var<double> s) { return sd_loss(s, y, &teacher, LossWeights{1 + 1 / t, 1.0}, t).total; },
          z);
      CHECK(err < 1e-6);
    }
  }
}
