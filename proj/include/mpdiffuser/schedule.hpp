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

#pragma once

#include <Eigen/Core>
#include <string>
#include <utility>
#include <vector>

#include "mpdiffuser/rng.hpp"

namespace mpd {

enum class ScheduleKind { kLinear, kCosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind kind);

/// DDPM variance schedule. Diffusion levels are 1-based: k in [1, K] indexes
/// a noising step, k = 0 means clean data. All tables have K + 1 entries with
/// index 0 as a sentinel (alpha_bar[0] = 1, beta[0] = sigma[0] = 0).
struct NoiseSchedule {
  int num_steps = 0;  // K
  ScheduleKind kind = ScheduleKind::kLinear;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> beta;       // beta_k in (0,1)
  std::vector<double> alpha;      // 1 - beta_k
  std::vector<double> alpha_bar;  // prod_{j<=k} alpha_j, strictly decreasing
  std::vector<double> sigma;      // posterior std; sigma_1 = 0 (deterministic last step)
};

/// Builds a schedule of the given family. Linear interpolates beta from
/// beta_min to beta_max; cosine follows the squared-cosine alpha_bar profile
/// (beta bounds are ignored beyond clipping).
NoiseSchedule build_schedule(ScheduleKind kind, int num_steps, double beta_min,
                             double beta_max);

/// Task default per design note: cosine at K >= 100, linear otherwise.
NoiseSchedule default_schedule(int num_steps);

/// Closed-form forward marginal: tau_k = sqrt(abar_k) tau0 + sqrt(1-abar_k) eps.
/// The injected eps is written to *injected_noise for loss computation.
Eigen::MatrixXf forward_noise(const Eigen::MatrixXf& tau0, int k,
                              const NoiseSchedule& schedule, Rng& rng,
                              Eigen::MatrixXf* injected_noise);

/// Same marginal with caller-supplied noise (training path reuses samples).
Eigen::MatrixXf forward_noise_with(const Eigen::MatrixXf& tau0, int k,
                                   const NoiseSchedule& schedule,
                                   const Eigen::MatrixXf& eps);

/// One reverse step through the epsilon parameterization:
///   mean = (tau_k - beta_k / sqrt(1-abar_k) * eps_hat) / sqrt(alpha_k)
/// Returns (posterior mean, posterior variance scale sigma_k^2). The score
/// form s = -eps_hat / sqrt(1-abar_k) gives the identical update.
std::pair<Eigen::MatrixXf, double> denoise_step(const Eigen::MatrixXf& tau_k,
                                                const Eigen::MatrixXf& eps_hat,
                                                int k, const NoiseSchedule& schedule);

/// Classifier-free guidance: eps_uncond + omega * (eps_cond - eps_uncond).
Eigen::MatrixXf cfg_combine(const Eigen::MatrixXf& eps_cond,
                            const Eigen::MatrixXf& eps_uncond, double omega);

}  // namespace mpd
