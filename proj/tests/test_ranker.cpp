// Copyright 2026 The mpdiffuser authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "mpdiffuser/envs.hpp"
#include "mpdiffuser/errors.hpp"
#include "mpdiffuser/ranker.hpp"

using namespace mpd;

namespace {

/// Reference implementation of the budget-aware rule, written independently.
int brute_force_select(const std::vector<ScoredCandidate>& cs) {
  int best = -1;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    if (!cs[i].feasible) continue;
    if (best < 0 || cs[i].j_hat > cs[static_cast<std::size_t>(best)].j_hat)
      best = static_cast<int>(i);
  }
  if (best >= 0) return cs[static_cast<std::size_t>(best)].index;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    if (best < 0 ||
        cs[i].c_hat.sum() < cs[static_cast<std::size_t>(best)].c_hat.sum())
      best = static_cast<int>(i);
  }
  return cs[static_cast<std::size_t>(best)].index;
}

}  // namespace

TEST_CASE("discounted score: geometric reward sum") {
  Eigen::MatrixXf states = Eigen::MatrixXf::Zero(1, 3);
  Eigen::MatrixXf actions = Eigen::MatrixXf::Zero(1, 3);
  const StepModel one = [](const Eigen::VectorXf&, const Eigen::VectorXf&) {
    return 1.0;
  };
  const auto [j, c] = score(states, actions, one, {}, 0.5);
  CHECK(j == doctest::Approx(1.75));
  CHECK(c.size() == 0);
}

TEST_CASE("discounted score: zero cost model stays zero at gamma = 1") {
  Eigen::MatrixXf states = Eigen::MatrixXf::Zero(2, 5);
  Eigen::MatrixXf actions = Eigen::MatrixXf::Zero(1, 5);
  const StepModel zero = [](const Eigen::VectorXf&, const Eigen::VectorXf&) {
    return 0.0;
  };
  const auto [j, c] = score(states, actions, zero, {zero}, 1.0);
  CHECK(j == doctest::Approx(0.0));
  REQUIRE(c.size() == 1);
  CHECK(c(0) == doctest::Approx(0.0));
}

TEST_CASE("analytic quadratic score matches a direct sum") {
  const auto spec = LinearSystemSpec::make_double_integrator();
  Eigen::MatrixXf states(2, 3), actions(1, 3);
  states << 1.0f, -0.5f, 0.25f, 0.2f, 0.1f, -0.3f;
  actions << 0.4f, -0.2f, 0.1f;
  const StepModel reward = [&spec](const Eigen::VectorXf& x,
                                   const Eigen::VectorXf& u) {
    const Eigen::VectorXd xd = x.cast<double>(), ud = u.cast<double>();
    return -(xd.dot(spec.Q * xd) + ud.dot(spec.R * ud));
  };
  const auto [j, c] = score(states, actions, reward, {}, 1.0);
  (void)c;
  double direct = 0.0;
  for (int t = 0; t < 3; ++t) {
    const Eigen::VectorXd x = states.col(t).cast<double>();
    const Eigen::VectorXd u = actions.col(t).cast<double>();
    direct += -(x.dot(spec.Q * x) + u.dot(spec.R * u));
  }
  CHECK(std::abs(j - direct) < 1e-12 * (1.0 + std::abs(direct)));
}

TEST_CASE("selection filters by feasibility then maximizes return") {
  Eigen::VectorXd rem = Eigen::VectorXd::Constant(1, 20.0);
  std::vector<ScoredCandidate> cs;
  cs.push_back(make_scored(0, 10.0, Eigen::VectorXd::Constant(1, 5.0), rem));
  cs.push_back(make_scored(1, 50.0, Eigen::VectorXd::Constant(1, 30.0), rem));
  CHECK(select_budget_aware(cs) == 0);
}

TEST_CASE("all-infeasible selection falls back to least cost") {
  Eigen::VectorXd rem = Eigen::VectorXd::Constant(1, 5.0);
  std::vector<ScoredCandidate> cs;
  cs.push_back(make_scored(0, 100.0, Eigen::VectorXd::Constant(1, 9.0), rem));
  cs.push_back(make_scored(1, 1.0, Eigen::VectorXd::Constant(1, 7.0), rem));
  CHECK(select_budget_aware(cs) == 1);
}

TEST_CASE("selection ties break toward the lowest index") {
  Eigen::VectorXd rem = Eigen::VectorXd::Constant(1, 10.0);
  std::vector<ScoredCandidate> cs;
  cs.push_back(make_scored(0, 3.0, Eigen::VectorXd::Constant(1, 1.0), rem));
  cs.push_back(make_scored(1, 3.0, Eigen::VectorXd::Constant(1, 1.0), rem));
  CHECK(select_budget_aware(cs) == 0);
}

TEST_CASE("fuzz: selection matches brute force on 1000 trials") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 64);
    const int m = rng.uniform_int(1, 3);
    Eigen::VectorXd rem(m);
    for (int i = 0; i < m; ++i) rem(i) = 10.0 * rng.uniform();
    std::vector<ScoredCandidate> cs;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd c(m);
      for (int d = 0; d < m; ++d)
        c(d) = 12.0 * rng.uniform() * (rng.bernoulli(0.2) ? 0.0 : 1.0);
      // Coarse grid of returns makes exact ties common.
      const double j = rng.uniform_int(0, 5);
      cs.push_back(make_scored(i, j, std::move(c), rem));
    }
    CHECK(select_budget_aware(cs) == brute_force_select(cs));
  }
}

TEST_CASE("fuzz: never selects infeasible while a feasible candidate exists") {
  Rng rng(31337);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = rng.uniform_int(1, 16);
    Eigen::VectorXd rem = Eigen::VectorXd::Constant(1, 5.0 * rng.uniform());
    std::vector<ScoredCandidate> cs;
    bool any_feasible = false;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd c = Eigen::VectorXd::Constant(1, 8.0 * rng.uniform());
      cs.push_back(make_scored(i, 10.0 * rng.uniform(), std::move(c), rem));
      any_feasible = any_feasible || cs.back().feasible;
    }
    const int pick = select_budget_aware(cs);
    if (any_feasible) CHECK(cs[static_cast<std::size_t>(pick)].feasible);
  }
}

TEST_CASE("generic ranking: argmax, tie, and non-finite exclusion") {
  CHECK(rank_generic({3.0}) == 0);
  CHECK(rank_generic({1.0, 5.0, 5.0}) == 1);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK(rank_generic({nan, 2.0, 9.0}) == 2);
  CHECK_THROWS_AS(rank_generic({nan, nan}), UsageError);
  CHECK_THROWS_AS(rank_generic({}), UsageError);
}

TEST_CASE("generic ranking is invariant under monotone transforms") {
  Rng rng(55);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> rho;
    for (int i = 0; i < 10; ++i) rho.push_back(4.0 * rng.uniform() - 2.0);
    std::vector<double> warped;
    for (double r : rho) warped.push_back(std::exp(3.0 * r) + 1.0);
    CHECK(rank_generic(rho) == rank_generic(warped));
  }
}

TEST_CASE("budget updates decrement, floor at zero, and telescope") {
  BudgetSpec b;
  b.budget = Eigen::VectorXd::Constant(1, 10.0);
  b.remaining = b.budget;
  update_remaining_budget(b, Eigen::VectorXd::Zero(1));
  CHECK(b.remaining(0) == doctest::Approx(10.0));
  update_remaining_budget(b, Eigen::VectorXd::Constant(1, 3.0));
  CHECK(b.remaining(0) == doctest::Approx(7.0));
  update_remaining_budget(b, Eigen::VectorXd::Constant(1, 100.0));
  CHECK(b.remaining(0) == doctest::Approx(0.0));
  CHECK_THROWS_AS(update_remaining_budget(b, Eigen::VectorXd::Constant(1, -1.0)),
                  UsageError);

  // Telescoping: cumulative decrements equal the (capped) total cost.
  BudgetSpec t;
  t.budget = Eigen::VectorXd::Constant(1, 100.0);
  t.remaining = t.budget;
  double total = 0.0;
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const double c = rng.uniform();
    total += c;
    update_remaining_budget(t, Eigen::VectorXd::Constant(1, c));
  }
  CHECK(t.remaining(0) == doctest::Approx(100.0 - total));
}

TEST_CASE("learned step model fits an analytic quadratic reward") {
  const auto spec = LinearSystemSpec::make_double_integrator();
  ExpertConfig expert;
  expert.noise_prob = 0.3;
  expert.num_trajectories = 20;
  Rng gen(71);
  const Dataset data = generate_linear_dataset(spec, expert, gen);
  const Normalizer norm = fit_normalizer(data);

  Rng rng(72);
  MlpModel model(2, 1, 32, rng);
  model.fit(data, norm, -1, 1500, 64, 1e-3, rng);

  // Held-out accuracy relative to reward variance.
  double se = 0.0, var = 0.0, mean = 0.0;
  long n = 0;
  for (int i = 0; i < 4; ++i)
    for (int t = 0; t < data.episodes[i].length(); t += 7) {
      mean += data.episodes[i].rewards(t);
      ++n;
    }
  mean /= double(n);
  for (int i = 0; i < 4; ++i)
    for (int t = 0; t < data.episodes[i].length(); t += 7) {
      const auto& ep = data.episodes[i];
      const double pred = model.predict(ep.states.col(t), ep.actions.col(t));
      se += (pred - ep.rewards(t)) * (pred - ep.rewards(t));
      var += (ep.rewards(t) - mean) * (ep.rewards(t) - mean);
    }
  CHECK(se / var < 0.1);  // explains >= 90% of the variance
}
