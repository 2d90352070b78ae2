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

#include "mpdiffuser/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "mpdiffuser/errors.hpp"

namespace mpd {

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ConfigError("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kLinear ? "linear" : "cosine";
}

NoiseSchedule build_schedule(ScheduleKind kind, int num_steps, double beta_min,
                             double beta_max) {
  if (num_steps < 1) throw ConfigError("schedule needs num_steps >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("schedule needs 0 < beta_min <= beta_max < 1");

  NoiseSchedule s;
  s.num_steps = num_steps;
  s.kind = kind;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.assign(num_steps + 1, 0.0);
  s.alpha.assign(num_steps + 1, 1.0);
  s.alpha_bar.assign(num_steps + 1, 1.0);
  s.sigma.assign(num_steps + 1, 0.0);

  if (kind == ScheduleKind::kLinear) {
    for (int k = 1; k <= num_steps; ++k) {
      const double frac = num_steps > 1 ? double(k - 1) / double(num_steps - 1) : 0.0;
      s.beta[k] = beta_min + (beta_max - beta_min) * frac;
    }
  } else {
    // Squared-cosine alpha_bar profile with the usual small offset.
    const double offset = 0.008;
    auto f = [&](double k) {
      const double a = (k / num_steps + offset) / (1.0 + offset) * M_PI / 2.0;
      const double c = std::cos(a);
      return c * c;
    };
    const double f0 = f(0.0);
    double prev_abar = 1.0;
    for (int k = 1; k <= num_steps; ++k) {
      const double abar = f(double(k)) / f0;
      double beta = 1.0 - abar / prev_abar;
      beta = std::clamp(beta, 1e-8, 0.999);
      s.beta[k] = beta;
      prev_abar = prev_abar * (1.0 - beta);
    }
  }

  for (int k = 1; k <= num_steps; ++k) {
    s.alpha[k] = 1.0 - s.beta[k];
    s.alpha_bar[k] = s.alpha_bar[k - 1] * s.alpha[k];
    // Posterior std; zero-variance final step (k = 1).
    s.sigma[k] = k >= 2 ? std::sqrt(s.beta[k] * (1.0 - s.alpha_bar[k - 1]) /
                                    (1.0 - s.alpha_bar[k]))
                        : 0.0;
  }
  return s;
}

NoiseSchedule default_schedule(int num_steps) {
  return num_steps >= 100 ? build_schedule(ScheduleKind::kCosine, num_steps, 1e-4, 0.2)
                          : build_schedule(ScheduleKind::kLinear, num_steps, 1e-4, 0.2);
}

namespace {
void check_level(int k, const NoiseSchedule& s) {
  if (k < 1 || k > s.num_steps)
    throw UsageError("diffusion level " + std::to_string(k) + " outside [1, " +
                     std::to_string(s.num_steps) + "]");
}
}  // namespace

Eigen::MatrixXf forward_noise(const Eigen::MatrixXf& tau0, int k,
                              const NoiseSchedule& schedule, Rng& rng,
                              Eigen::MatrixXf* injected_noise) {
  check_level(k, schedule);
  Eigen::MatrixXf eps = rng.normal_matrix(tau0.rows(), tau0.cols());
  Eigen::MatrixXf out = forward_noise_with(tau0, k, schedule, eps);
  if (injected_noise) *injected_noise = std::move(eps);
  return out;
}

Eigen::MatrixXf forward_noise_with(const Eigen::MatrixXf& tau0, int k,
                                   const NoiseSchedule& schedule,
                                   const Eigen::MatrixXf& eps) {
  if (k == 0) return tau0;  // identity convention at the clean level
  check_level(k, schedule);
  const float a = static_cast<float>(std::sqrt(schedule.alpha_bar[k]));
  const float b = static_cast<float>(std::sqrt(1.0 - schedule.alpha_bar[k]));
  return a * tau0 + b * eps;
}

std::pair<Eigen::MatrixXf, double> denoise_step(const Eigen::MatrixXf& tau_k,
                                                const Eigen::MatrixXf& eps_hat,
                                                int k, const NoiseSchedule& schedule) {
  check_level(k, schedule);
  const double beta = schedule.beta[k];
  const double coeff = beta / std::sqrt(1.0 - schedule.alpha_bar[k]);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[k]);
  Eigen::MatrixXf mean =
      (tau_k - static_cast<float>(coeff) * eps_hat) * static_cast<float>(inv_sqrt_alpha);
  return {std::move(mean), schedule.sigma[k] * schedule.sigma[k]};
}

Eigen::MatrixXf cfg_combine(const Eigen::MatrixXf& eps_cond,
                            const Eigen::MatrixXf& eps_uncond, double omega) {
  return eps_uncond + static_cast<float>(omega) * (eps_cond - eps_uncond);
}

}  // namespace mpd
