#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <doctest.h>

#include "casp/bit_alloc.hpp"
#include "casp/error.hpp"
#include "test_util.hpp"

using namespace casp;
using Eigen::VectorXd;

namespace {

LayerImportance scores(std::initializer_list<double> s) {
  LayerImportance imp;
  imp.scores = Eigen::Map<const VectorXd>(s.begin(), static_cast<Eigen::Index>(s.size()));
  return imp;
}

VectorXd random_scores(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VectorXd s(n);
  for (auto& v : s) v = u(rng);
  return s;
}

double weighted_avg(const BitPlan& p) {
  double used = 0.0;
  for (std::size_t l = 0; l < p.bits_int.size(); ++l) used += p.bits_int[l] * p.params[static_cast<Eigen::Index>(l)];
  return used / p.total_params;
}

// Best assignment over allowed^L maximizing sum s b p within the budget.
std::vector<int> exhaustive_round(const VectorXd& s, const VectorXd& p, double b_avg, const std::vector<int>& allowed) {
  const auto n = static_cast<std::size_t>(s.size());
  std::vector<int> bits(n), best;
  double best_value = -1e300;
  std::size_t combos = 1;
  for (std::size_t i = 0; i < n; ++i) combos *= allowed.size();
  for (std::size_t code = 0; code < combos; ++code) {
    std::size_t c = code;
    double used = 0.0, value = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      bits[l] = allowed[c % allowed.size()];
      c /= allowed.size();
      used += bits[l] * p[static_cast<Eigen::Index>(l)];
      value += s[static_cast<Eigen::Index>(l)] * bits[l] * p[static_cast<Eigen::Index>(l)];
    }
    if (used / p.sum() <= b_avg * (1 + 1e-12) && value > best_value + 1e-12) {
      best_value = value;
      best = bits;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("block influence: identity, negation and a scalar oracle (seed 41)") {
  ActivationBatch a, b;
  a.x = casp::testing::randn(64, 8, 41);
  CHECK(block_influence(a, a) == doctest::Approx(0.0).epsilon(1e-12));
  b.x = -a.x;
  CHECK(block_influence(a, b) == doctest::Approx(2.0));
  b.x = casp::testing::randn(64, 8, 42);
  double cos_sum = 0.0;
  for (int i = 0; i < 64; ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int j = 0; j < 8; ++j) {
      dot += a.x(i, j) * b.x(i, j);
      na += a.x(i, j) * a.x(i, j);
      nb += b.x(i, j) * b.x(i, j);
    }
    cos_sum += dot / std::sqrt(na * nb);
  }
  CHECK(block_influence(a, b) == doctest::Approx(1.0 - cos_sum / 64).epsilon(1e-7));
}

TEST_CASE("block influence skips zero rows and rejects all-zero input") {
  ActivationBatch a, b;
  a.x = casp::testing::randn(4, 3, 1);
  b.x = a.x;
  b.x.row(2).setZero();
  const auto bi = block_influence_detail(a, b);
  CHECK(bi.skipped_rows == 1);
  CHECK(bi.score == doctest::Approx(0.0).epsilon(1e-12));
  b.x.setZero();
  CHECK_THROWS_AS(block_influence(a, b), Error);
  b.x.resize(3, 3);
  CHECK_THROWS_AS(block_influence(a, b), Error);
}

TEST_CASE("equal scores and equal sizes give the uniform plan") {
  for (double mu : {0.01, 1.0, 100.0}) {
    const auto plan = allocate_bits(scores({0.3, 0.3, 0.3, 0.3}), VectorXd::Constant(4, 100.0), 2.25, mu);
    CHECK((plan.bits_cont.array() - 2.25).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("a very large mu flattens the plan") {
  const auto plan = allocate_bits(scores({0.1, 0.9, 0.4, 0.2}), VectorXd::Constant(4, 1.0), 2.0, 1e6);
  CHECK((plan.bits_cont.array() - 2.0).abs().maxCoeff() <= 1e-3);
}

TEST_CASE("L=3 closed form agrees with the grid maximizer") {
  const auto imp = scores({0.1, 0.5, 0.4});
  const VectorXd p = VectorXd::Ones(3);
  const auto plan = allocate_bits(imp, p, 2.0, 0.1);
  const auto grid = alloc_oracle(imp, p, 2.0, 0.1, 0.01);
  CHECK((plan.bits_cont - grid.bits_cont).cwiseAbs().maxCoeff() <= 0.01 + 1e-12);
  CHECK(plan.objective_value >= grid.objective_value - 1e-9);
  CHECK(plan.bits_cont.dot(p) / 3.0 == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("closed form certifies against the oracle on 50 seeded instances") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> layer_count(2, 5), size(1, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = layer_count(rng);
    LayerImportance imp;
    imp.scores = random_scores(n, rng);
    VectorXd p(n);
    const bool equal = trial % 2 == 0;
    for (auto& v : p) v = equal ? 2.0 : size(rng);
    const double mu = 0.05 + 0.5 * (trial % 5) / 4.0;
    const auto plan = allocate_bits(imp, p, 2.0, mu);
    const auto grid = alloc_oracle(imp, p, 2.0, mu, 0.01);
    CHECK(plan.objective_value >= grid.objective_value - 1e-9);
    // A lattice maximizer can sit up to L-1 steps from the continuous one
    // along a flat direction; the last coordinate absorbs the rest.
    const VectorXd gap = (plan.bits_cont - grid.bits_cont).cwiseAbs();
    CHECK(gap.head(n - 1).maxCoeff() <= 0.01 * (n - 1) + 1e-9);
    CHECK(gap[n - 1] <= 0.01 * (n - 1) * (p.head(n - 1).sum() / p[n - 1]) + 1e-9);
    CHECK(plan.bits_cont.dot(p) / p.sum() == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(plan.bits_cont.minCoeff() > 0.0);
  }
}

TEST_CASE("budget is exact with unequal layer sizes") {
  const auto imp = scores({0.05, 0.4, 0.2, 0.9, 0.3});
  VectorXd p(5);
  p << 1000, 25000, 4096, 300, 77777;
  for (double mu : {1.0, 1e2, 1e4}) {
    const auto plan = allocate_bits(imp, p, 2.25, mu);
    CHECK(std::abs(plan.bits_cont.dot(p) / p.sum() - 2.25) <= 1e-9 * 2.25);
    // Stationarity of the Lagrangian in every coordinate.
    for (Eigen::Index l = 0; l < 5; ++l) {
      if (plan.bits_cont[l] < 1e-290) continue;  // underflowed layers
      const double grad = imp.scores[l] * p[l] - mu * std::log(plan.bits_cont[l]) - mu - plan.lambda * p[l] / p.sum();
      CHECK(std::abs(grad) <= 1e-6 * (mu + imp.scores[l] * p[l]));
    }
  }
}

TEST_CASE("shifting every score leaves the equal-size plan unchanged") {
  const auto a = allocate_bits(scores({0.1, 0.6, 0.3}), VectorXd::Constant(3, 4.0), 2.0, 0.5);
  const auto b = allocate_bits(scores({0.6, 1.1, 0.8}), VectorXd::Constant(3, 4.0), 2.0, 0.5);
  CHECK((a.bits_cont - b.bits_cont).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("more important layers get more bits") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    LayerImportance imp;
    imp.scores = random_scores(6, rng);
    VectorXd p = VectorXd::Constant(6, 10.0);
    if (trial % 2 == 1) p << 10, 12, 9, 11, 10, 13;
    const auto plan = allocate_bits(imp, p, 2.0, 0.5);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        if (imp.scores[i] * p[i] > imp.scores[j] * p[j] && p[i] == p[j]) CHECK(plan.bits_cont[i] > plan.bits_cont[j]);
      }
    }
  }
}

TEST_CASE("small mu concentrates the budget on the top layer") {
  const auto plan = allocate_bits(scores({0.1, 0.5, 0.4}), VectorXd::Ones(3), 2.0, 1e-4);
  CHECK(plan.bits_cont[1] == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(plan.bits_cont[0] < 1e-100);
}

TEST_CASE("a single layer takes exactly the budget") {
  const auto plan = allocate_bits(scores({0.7}), VectorXd::Constant(1, 123.0), 2.25, 0.3);
  CHECK(plan.bits_cont[0] == 2.25);
  CHECK(alloc_oracle(scores({0.7}), VectorXd::Constant(1, 123.0), 2.25, 0.3, 0.01).bits_cont[0] == 2.25);
  const auto unequal = allocate_bits(scores({0.7, 0.2}), VectorXd(Eigen::Vector2d(5.0, 7.0)), 2.25, 0.3);
  CHECK(unequal.bits_cont.dot(Eigen::Vector2d(5.0, 7.0)) / 12.0 == doctest::Approx(2.25).epsilon(1e-12));
}

TEST_CASE("allocation input errors") {
  CHECK_THROWS_AS(allocate_bits(scores({0.1, 0.2}), VectorXd::Ones(2), 2.0, 0.0), Error);
  CHECK_THROWS_AS(allocate_bits(scores({0.1, 0.2}), VectorXd::Ones(2), 0.0, 1.0), Error);
  CHECK_THROWS_AS(allocate_bits(scores({0.1, 0.2}), VectorXd::Ones(3), 2.0, 1.0), Error);
  CHECK_THROWS_AS(allocate_bits(scores({0.1, 0.2}), VectorXd(Eigen::Vector2d(1.0, 0.0)), 2.0, 1.0), Error);
  CHECK_THROWS_AS(alloc_oracle(scores({1, 1, 1, 1, 1, 1, 1}), VectorXd::Ones(7), 2.0, 1.0, 0.01), Error);
}

TEST_CASE("default mu is a tenth of the spread of s p") {
  CHECK(default_mu(VectorXd(Eigen::Vector2d(0.1, 0.3)), VectorXd::Constant(2, 10.0)) == doctest::Approx(0.1));
  CHECK(default_mu(VectorXd::Constant(3, 0.2), VectorXd::Constant(3, 5.0)) == 1.0);
}

TEST_CASE("rounding keeps integral plans and fills a tight budget with the low width") {
  BitPlan plan = allocate_bits(scores({0.1, 0.2, 0.3}), VectorXd::Ones(3), 2.0, 1.0);
  plan.bits_cont = Eigen::Vector3d(3.0, 2.0, 1.0);
  const std::vector<int> allowed{1, 2, 3};
  CHECK(round_bits(plan, allowed).bits_int == std::vector<int>{3, 2, 1});

  LayerImportance imp;
  std::mt19937_64 rng(3);
  imp.scores = random_scores(10, rng);
  const auto tight = round_bits(allocate_bits(imp, VectorXd::Ones(10), 2.0, 0.1), std::vector<int>{2, 3});
  CHECK(tight.bits_int == std::vector<int>(10, 2));
}

TEST_CASE("rounding the four-layer example matches exhaustive enumeration") {
  BitPlan plan = allocate_bits(scores({0.9, 0.8, 0.3, 0.2}), VectorXd::Ones(4), 2.0, 1.0);
  plan.bits_cont = Eigen::Vector4d(2.6, 2.4, 1.6, 1.4);
  const std::vector<int> allowed{2, 3};
  const auto rounded = round_bits(plan, allowed);
  CHECK(rounded.bits_int == exhaustive_round(plan.scores, plan.params, 2.0, allowed));
  // Four 2-bit layers already use the whole budget.
  CHECK(rounded.bits_int == std::vector<int>{2, 2, 2, 2});
}

TEST_CASE("greedy rounding matches enumeration on equal-size instances") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + trial % 8;
    LayerImportance imp;
    imp.scores = random_scores(n, rng);
    const double b_avg = 2.0 + 0.1 * (trial % 10);
    const VectorXd p = VectorXd::Constant(n, 64.0);
    const auto plan = round_bits(allocate_bits(imp, p, b_avg, 0.5), std::vector<int>{2, 3});
    CHECK(plan.bits_int == exhaustive_round(imp.scores, p, b_avg, {2, 3}));
    CHECK(weighted_avg(plan) <= b_avg + 1e-12);
    CHECK(weighted_avg(plan) >= b_avg - p.maxCoeff() / p.sum() - 1e-12);
  }
}

TEST_CASE("rounding stays within one layer of slack for unequal sizes") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> size(100, 1000);
  for (int trial = 0; trial < 30; ++trial) {
    LayerImportance imp;
    imp.scores = random_scores(6, rng);
    VectorXd p(6);
    for (auto& v : p) v = size(rng);
    const auto plan = round_bits(allocate_bits(imp, p, 2.25, 50.0), std::vector<int>{2, 3});
    CHECK(weighted_avg(plan) <= 2.25 + 1e-12);
    CHECK(weighted_avg(plan) >= 2.25 - p.maxCoeff() / p.sum() - 1e-12);
  }
}

TEST_CASE("rounding errors") {
  const auto plan = allocate_bits(scores({0.1, 0.2}), VectorXd::Ones(2), 2.0, 1.0);
  CHECK_THROWS_AS(round_bits(plan, std::vector<int>{}), Error);
  CHECK_THROWS_WITH_AS(round_bits(plan, std::vector<int>{3, 4}), doctest::Contains("infeasible"), Error);
}
