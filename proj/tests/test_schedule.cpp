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

#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mpdiffuser/errors.hpp"
#include "mpdiffuser/schedule.hpp"

using namespace mpd;

TEST_CASE("single linear step has alpha_bar = 1 - beta") {
  const auto s = build_schedule(ScheduleKind::kLinear, 1, 0.1, 0.1);
  CHECK(s.alpha_bar[0] == doctest::Approx(1.0));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.9));
  CHECK(s.sigma[1] == doctest::Approx(0.0));
}

TEST_CASE("two linear steps multiply alphas") {
  const auto s = build_schedule(ScheduleKind::kLinear, 2, 0.1, 0.2);
  CHECK(s.beta[1] == doctest::Approx(0.1));
  CHECK(s.beta[2] == doctest::Approx(0.2));
  CHECK(s.alpha_bar[2] == doctest::Approx(0.72));
}

TEST_CASE("cosine schedule noises almost completely at K = 100") {
  const auto s = build_schedule(ScheduleKind::kCosine, 100, 1e-4, 0.999);
  CHECK(s.alpha_bar[100] < 1e-3);
}

TEST_CASE("schedule invariants hold for both families") {
  for (const auto& s : {build_schedule(ScheduleKind::kLinear, 50, 1e-4, 0.2),
                        build_schedule(ScheduleKind::kCosine, 100, 1e-4, 0.999)}) {
    for (int k = 1; k <= s.num_steps; ++k) {
      CHECK(s.beta[k] > 0.0);
      CHECK(s.beta[k] < 1.0);
      CHECK(s.alpha[k] == doctest::Approx(1.0 - s.beta[k]));
      CHECK(s.alpha_bar[k] < s.alpha_bar[k - 1]);
      if (k >= 2) {
        const double want =
            s.beta[k] * (1.0 - s.alpha_bar[k - 1]) / (1.0 - s.alpha_bar[k]);
        CHECK(s.sigma[k] * s.sigma[k] == doctest::Approx(want).epsilon(1e-12));
      }
    }
    CHECK(s.sigma[1] == doctest::Approx(0.0));
  }
}

TEST_CASE("invalid schedule parameters are rejected") {
  CHECK_THROWS_AS(build_schedule(ScheduleKind::kLinear, 0, 0.1, 0.2), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::kLinear, 5, 0.0, 0.2), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::kLinear, 5, 0.3, 0.2), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::kLinear, 5, 0.1, 1.0), ConfigError);
}

TEST_CASE("forward marginal: zero-noise and identity cases") {
  const auto s = build_schedule(ScheduleKind::kLinear, 4, 0.05, 0.2);
  Eigen::MatrixXf tau0(2, 3);
  tau0 << 1, -2, 3, 4, 5, -6;

  const Eigen::MatrixXf zero = Eigen::MatrixXf::Zero(2, 3);
  const auto tk = forward_noise_with(tau0, 3, s, zero);
  const float a = static_cast<float>(std::sqrt(s.alpha_bar[3]));
  CHECK((tk - a * tau0).norm() == doctest::Approx(0.0));

  const auto t0 = forward_noise_with(tau0, 0, s, zero);
  CHECK((t0 - tau0).norm() == doctest::Approx(0.0));
}

TEST_CASE("forward marginal matches its first two moments") {
  const auto s = build_schedule(ScheduleKind::kLinear, 10, 0.01, 0.2);
  const int k = 6;
  const int n = 100000;
  Eigen::MatrixXf tau0(1, 1);
  tau0 << 1.5f;

  Rng rng(123);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::MatrixXf eps;
    const auto tk = forward_noise(tau0, k, s, rng, &eps);
    sum += tk(0, 0);
    sum_sq += double(tk(0, 0)) * tk(0, 0);
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  const double want_mean = std::sqrt(s.alpha_bar[k]) * 1.5;
  const double want_var = 1.0 - s.alpha_bar[k];
  const double se = std::sqrt(want_var / n);
  CHECK(std::abs(mean - want_mean) < 3.0 * se);
  CHECK(var == doctest::Approx(want_var).epsilon(0.05));
}

TEST_CASE("level outside [1, K] is rejected") {
  const auto s = build_schedule(ScheduleKind::kLinear, 4, 0.05, 0.2);
  Eigen::MatrixXf tau0 = Eigen::MatrixXf::Zero(1, 2);
  Rng rng(1);
  CHECK_THROWS_AS(forward_noise(tau0, 5, s, rng, nullptr), UsageError);
  CHECK_THROWS_AS(forward_noise(tau0, -1, s, rng, nullptr), UsageError);
}

TEST_CASE("true noise inverts the forward map at every level") {
  const auto s = build_schedule(ScheduleKind::kLinear, 20, 1e-3, 0.25);
  Rng rng(7);
  Eigen::MatrixXf tau0 = rng.normal_matrix(3, 5);
  for (int k = 1; k <= s.num_steps; ++k) {
    Eigen::MatrixXf eps;
    const auto tk = forward_noise(tau0, k, s, rng, &eps);
    const Eigen::MatrixXf rec =
        (tk - static_cast<float>(std::sqrt(1.0 - s.alpha_bar[k])) * eps) /
        static_cast<float>(std::sqrt(s.alpha_bar[k]));
    CHECK((rec - tau0).norm() < 1e-5 * tau0.norm());
  }
}

TEST_CASE("one-step denoise with the true noise recovers tau0") {
  const auto s = build_schedule(ScheduleKind::kLinear, 1, 0.3, 0.3);
  Rng rng(11);
  Eigen::MatrixXf tau0 = rng.normal_matrix(2, 4);
  Eigen::MatrixXf eps;
  const auto t1 = forward_noise(tau0, 1, s, rng, &eps);
  const auto [mean, var] = denoise_step(t1, eps, 1, s);
  CHECK(var == doctest::Approx(0.0));
  CHECK((mean - tau0).norm() < 1e-6 * (1.0 + tau0.norm()));
}

TEST_CASE("denoise step approaches identity as beta -> 0") {
  const auto s = build_schedule(ScheduleKind::kLinear, 2, 1e-8, 1e-8);
  Eigen::MatrixXf tau(1, 3);
  tau << 0.3f, -0.7f, 2.0f;
  const auto [mean, var] = denoise_step(tau, Eigen::MatrixXf::Zero(1, 3), 2, s);
  (void)var;
  CHECK((mean - tau).norm() < 1e-6);
}

TEST_CASE("reverse chain under the analytic Gaussian score hits the target moments") {
  // Small betas keep the DDPM discretization error inside the 5% budget.
  const auto s = build_schedule(ScheduleKind::kLinear, 200, 1e-4, 0.05);
  const double m = 0.7, v = 0.09;
  const int chains = 10000;

  Rng rng(99);
  double sum = 0.0, sum_sq = 0.0;
  for (int c = 0; c < chains; ++c) {
    // Initialize from the exact level-K marginal of the target.
    const double x0 = m + std::sqrt(v) * rng.normal();
    const double aK = s.alpha_bar[s.num_steps];
    double x = std::sqrt(aK) * x0 + std::sqrt(1.0 - aK) * rng.normal();
    for (int k = s.num_steps; k >= 1; --k) {
      const double a = s.alpha_bar[k];
      const double marg_var = a * v + 1.0 - a;
      const double eps_hat = std::sqrt(1.0 - a) * (x - std::sqrt(a) * m) / marg_var;
      Eigen::MatrixXf xm(1, 1), em(1, 1);
      xm(0, 0) = static_cast<float>(x);
      em(0, 0) = static_cast<float>(eps_hat);
      const auto [mean, var_k] = denoise_step(xm, em, k, s);
      x = mean(0, 0);
      if (var_k > 0.0) x += std::sqrt(var_k) * rng.normal();
    }
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / chains;
  const double var = sum_sq / chains - mean * mean;
  CHECK(mean == doctest::Approx(m).epsilon(0.05));
  CHECK(var == doctest::Approx(v).epsilon(0.05));
}

TEST_CASE("level-K marginal is indistinguishable from a standard normal") {
  // Two-sample Kolmogorov-Smirnov at p = 0.01 on 10^4 draws each.
  const auto s = build_schedule(ScheduleKind::kCosine, 100, 1e-4, 0.999);
  const int n = 10000;
  Rng rng(5);
  Eigen::MatrixXf tau0(1, 1);
  tau0 << 0.4f;

  std::vector<double> a(n), b(n);
  for (int i = 0; i < n; ++i) {
    Eigen::MatrixXf eps;
    a[i] = forward_noise(tau0, s.num_steps, s, rng, &eps)(0, 0);
    b[i] = rng.normal();
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j]) ++i;
    else ++j;
    d = std::max(d, std::abs(double(i) / n - double(j) / n));
  }
  const double critical = 1.628 * std::sqrt(2.0 / n);  // c(0.01) sqrt((n+m)/nm)
  CHECK(d < critical);
}

TEST_CASE("classifier-free guidance identities") {
  Eigen::MatrixXf cond(1, 1), uncond(1, 1);
  cond << 2.0f;
  uncond << 1.0f;
  CHECK(cfg_combine(cond, uncond, 1.0)(0, 0) == doctest::Approx(2.0));
  CHECK(cfg_combine(cond, uncond, 0.0)(0, 0) == doctest::Approx(1.0));
  CHECK(cfg_combine(cond, uncond, 2.0)(0, 0) == doctest::Approx(3.0));

  // Affine in omega: value at the midpoint equals the average of endpoints.
  const double lo = cfg_combine(cond, uncond, 0.5)(0, 0);
  const double hi = cfg_combine(cond, uncond, 1.5)(0, 0);
  CHECK(cfg_combine(cond, uncond, 1.0)(0, 0) == doctest::Approx(0.5 * (lo + hi)));
}

TEST_CASE("default schedule family switches on K") {
  CHECK(default_schedule(50).kind == ScheduleKind::kLinear);
  CHECK(default_schedule(100).kind == ScheduleKind::kCosine);
}
