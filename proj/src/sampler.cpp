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

#include "mpdiffuser/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "mpdiffuser/errors.hpp"

namespace mpd {

SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "alternating") return SampleMode::kAlternating;
  if (s == "planner_only") return SampleMode::kPlannerOnly;
  if (s == "combined_score") return SampleMode::kCombinedScore;
  if (s == "joint_baseline") return SampleMode::kJointBaseline;
  throw ConfigError("unknown sample mode: " + s);
}

std::string to_string(SampleMode mode) {
  switch (mode) {
    case SampleMode::kAlternating: return "alternating";
    case SampleMode::kPlannerOnly: return "planner_only";
    case SampleMode::kCombinedScore: return "combined_score";
    case SampleMode::kJointBaseline: return "joint_baseline";
  }
  throw ConfigError("unknown sample mode value");
}

void SamplerConfig::validate() const {
  if (!std::isfinite(omega)) throw ConfigError("omega must be finite");
  if (!(alpha_temp > 0.0) || !std::isfinite(alpha_temp))
    throw ConfigError("alpha_temp must be positive and finite");
  if (lambda < 0.0 || !std::isfinite(lambda))
    throw ConfigError("lambda must be finite and >= 0");
  if (k_effective < 0) throw ConfigError("k_effective must be >= 0");
}

DenoiserHandle make_handle(const Denoiser& model) {
  DenoiserHandle h;
  h.role = model.config().role;
  h.state_dim = model.config().state_dim;
  h.action_dim = model.config().action_dim;
  h.horizon = model.config().horizon;
  h.num_steps = model.config().num_steps;
  h.inpaint = model.config().role == Role::kPlanner && !model.config().film_x0;
  h.norm = model.normalizer();
  // The view copies the model reference; the Denoiser must outlive the handle.
  h.predict = [&model](const Eigen::MatrixXf& x, const std::vector<int>& k,
                       const Eigen::MatrixXf& x0, const Eigen::MatrixXf& y,
                       const std::vector<unsigned char>& null_flag) {
    return model.predict_batch(x, k, x0, y, null_flag);
  };
  return h;
}

namespace {

void check_compatible(const DenoiserHandle& planner, const DenoiserHandle* dynamics,
                      const NoiseSchedule& schedule, const SamplerConfig& config) {
  config.validate();
  if (planner.role != Role::kPlanner)
    throw ConfigError("sampler: planner handle has wrong role");
  if (planner.num_steps != schedule.num_steps)
    throw ConfigError("sampler: planner level count does not match the schedule");
  if (config.k_effective > schedule.num_steps)
    throw ConfigError("sampler: k_effective exceeds the schedule length");

  const bool needs_dynamics =
      config.mode == SampleMode::kAlternating ||
      (config.mode == SampleMode::kCombinedScore && config.lambda_prime() > 0.0);
  if (needs_dynamics) {
    if (!dynamics)
      throw ConfigError("sampler: mode requires a dynamics denoiser");
    if (dynamics->role != Role::kDynamics)
      throw ConfigError("sampler: dynamics handle has wrong role");
    if (dynamics->state_dim != planner.state_dim ||
        dynamics->action_dim != planner.action_dim ||
        dynamics->horizon != planner.horizon ||
        dynamics->num_steps != planner.num_steps)
      throw ConfigError("sampler: incompatible planner/dynamics denoisers");
  }
  if (config.mode == SampleMode::kJointBaseline && !planner.inpaint)
    throw ConfigError(
        "sampler: joint_baseline requires an inpainting planner (no x0 input)");
}

/// Classifier-free-guided prediction, batching all candidates and both
/// pathways (conditional + null) into one call. tau is (sd+ad) x (H*n).
Eigen::MatrixXf cfg_eval(const DenoiserHandle& model, const Eigen::MatrixXf& tau,
                         int k, const Conditioning& cond, double omega, int n,
                         std::int64_t& eval_counter) {
  const int H = model.horizon;
  const int cols = H * n;
  Eigen::MatrixXf x(tau.rows(), 2 * cols);
  x.leftCols(cols) = tau;
  x.rightCols(cols) = tau;

  const std::vector<int> ks(static_cast<std::size_t>(2 * n), k);
  const Eigen::MatrixXf x0 = cond.x0.replicate(1, 2 * n);
  const Eigen::MatrixXf y = cond.y.replicate(1, 2 * n);
  std::vector<unsigned char> nulls(static_cast<std::size_t>(2 * n), 0);
  for (int i = 0; i < n; ++i) nulls[static_cast<std::size_t>(i)] = cond.null_flag;
  for (int i = n; i < 2 * n; ++i) nulls[static_cast<std::size_t>(i)] = 1;

  const Eigen::MatrixXf out = model.predict(x, ks, x0, y, nulls);
  eval_counter += 1;
  return cfg_combine(out.leftCols(cols), out.rightCols(cols), omega);
}

/// Overwrites the first state column of every candidate with x0 (inpainting
/// conditioning for planners trained without the x0 FiLM input).
void inpaint_clamp(Eigen::MatrixXf& tau, const Conditioning& cond, int sd, int H,
                   int n) {
  if (cond.x0.size() != sd)
    throw ConfigError("sampler: inpainting requires an x0 of state dimension");
  for (int i = 0; i < n; ++i) tau.col(i * H).head(sd) = cond.x0;
}

/// The reverse chain shared by fresh sampling and warm starts. tau holds all
/// candidates side by side and is denoised in place from level k_start to 0.
void run_chain(const DenoiserHandle& planner, const DenoiserHandle* dynamics,
               const NoiseSchedule& schedule, const SamplerConfig& config,
               const Conditioning& cond, Eigen::MatrixXf& tau, int k_start, int n,
               Rng& rng, SampleStats& stats) {
  const int sd = planner.state_dim, H = planner.horizon;
  const float lp = static_cast<float>(config.lambda_prime());

  for (int k = k_start; k >= 1; --k) {
    if (config.mode == SampleMode::kAlternating) {
      // Dynamics half-step: posterior mean on states only, no noise added.
      const Eigen::MatrixXf eps_dyn =
          cfg_eval(*dynamics, tau, k, cond, config.omega, n, stats.dynamics_evals);
      auto [mean_x, var_x] =
          denoise_step(tau.topRows(sd), eps_dyn, k, schedule);
      (void)var_x;
      tau.topRows(sd) = mean_x;
    }

    Eigen::MatrixXf eps =
        cfg_eval(planner, tau, k, cond, config.omega, n, stats.planner_evals);
    if (config.mode == SampleMode::kCombinedScore && lp > 0.0f) {
      const Eigen::MatrixXf eps_dyn =
          cfg_eval(*dynamics, tau, k, cond, config.omega, n, stats.dynamics_evals);
      eps.topRows(sd) = (1.0f - lp) * eps.topRows(sd) + lp * eps_dyn;
    }

    auto [mean, var] = denoise_step(tau, eps, k, schedule);
    tau = mean;
    if (var > 0.0) {
      const float s = static_cast<float>(std::sqrt(config.alpha_temp * var));
      tau += s * rng.normal_matrix(tau.rows(), tau.cols());
    }
    if (planner.inpaint) inpaint_clamp(tau, cond, sd, H, n);
  }
}

std::vector<Plan> split_plans(const Eigen::MatrixXf& tau, const DenoiserHandle& planner,
                              int n) {
  const int sd = planner.state_dim, ad = planner.action_dim, H = planner.horizon;
  std::vector<Plan> plans(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Plan& p = plans[static_cast<std::size_t>(i)];
    p.norm_states = tau.block(0, i * H, sd, H);
    p.norm_actions = tau.block(sd, i * H, ad, H);
    p.states = planner.norm.denormalize_states(p.norm_states);
    p.actions = planner.norm.denormalize_actions(p.norm_actions);
  }
  return plans;
}

}  // namespace

std::vector<Plan> sample_plans(const DenoiserHandle& planner,
                               const DenoiserHandle* dynamics,
                               const NoiseSchedule& schedule,
                               const SamplerConfig& config, const Conditioning& cond,
                               int num_candidates, Rng& rng, SampleStats* stats) {
  check_compatible(planner, dynamics, schedule, config);
  if (num_candidates < 1) throw UsageError("num_candidates must be >= 1");
  const int sd = planner.state_dim, ad = planner.action_dim, H = planner.horizon;
  const int k_start = config.k_effective > 0 ? config.k_effective : schedule.num_steps;

  Eigen::MatrixXf tau = static_cast<float>(std::sqrt(config.alpha_temp)) *
                        rng.normal_matrix(sd + ad, H * num_candidates);
  if (planner.inpaint) inpaint_clamp(tau, cond, sd, H, num_candidates);

  SampleStats local;
  SampleStats& st = stats ? *stats : local;
  run_chain(planner, dynamics, schedule, config, cond, tau, k_start, num_candidates,
            rng, st);
  return split_plans(tau, planner, num_candidates);
}

Plan shift_plan(const Plan& previous, int executed_steps) {
  const int H = static_cast<int>(previous.norm_states.cols());
  const int s = std::clamp(executed_steps, 0, H);
  auto shift = [&](const Eigen::MatrixXf& m) {
    Eigen::MatrixXf out(m.rows(), H);
    out.leftCols(H - s) = m.rightCols(H - s);
    for (int i = H - s; i < H; ++i) out.col(i) = m.col(H - 1);
    return out;
  };
  Plan p;
  p.states = shift(previous.states);
  p.actions = shift(previous.actions);
  p.norm_states = shift(previous.norm_states);
  p.norm_actions = shift(previous.norm_actions);
  return p;
}

std::vector<Plan> warm_start_resample(const DenoiserHandle& planner,
                                      const DenoiserHandle* dynamics,
                                      const NoiseSchedule& schedule,
                                      const SamplerConfig& config,
                                      const Conditioning& cond, const Plan& previous,
                                      int executed_steps, int j, int num_candidates,
                                      Rng& rng, SampleStats* stats) {
  const int k_start = config.k_effective > 0 ? config.k_effective : schedule.num_steps;
  if (j < 0 || j > schedule.num_steps)
    throw UsageError("warm start level j outside [0, K]");
  if (j >= k_start)  // degenerate case: a full chain is a fresh sample
    return sample_plans(planner, dynamics, schedule, config, cond, num_candidates,
                        rng, stats);

  check_compatible(planner, dynamics, schedule, config);
  if (num_candidates < 1) throw UsageError("num_candidates must be >= 1");
  const int sd = planner.state_dim, ad = planner.action_dim, H = planner.horizon;

  const Plan shifted = shift_plan(previous, executed_steps);
  if (j == 0)
    return std::vector<Plan>(static_cast<std::size_t>(num_candidates), shifted);

  Eigen::MatrixXf tau0(sd + ad, H);
  tau0.topRows(sd) = shifted.norm_states;
  tau0.bottomRows(ad) = shifted.norm_actions;

  // Forward-noise each candidate to level j; the noise carries the same
  // temperature as fresh initialization.
  const float a = static_cast<float>(std::sqrt(schedule.alpha_bar[j]));
  const float c =
      static_cast<float>(std::sqrt(config.alpha_temp * (1.0 - schedule.alpha_bar[j])));
  Eigen::MatrixXf tau(sd + ad, H * num_candidates);
  for (int i = 0; i < num_candidates; ++i)
    tau.middleCols(i * H, H) = a * tau0 + c * rng.normal_matrix(sd + ad, H);
  if (planner.inpaint) inpaint_clamp(tau, cond, sd, H, num_candidates);

  SampleStats local;
  SampleStats& st = stats ? *stats : local;
  run_chain(planner, dynamics, schedule, config, cond, tau, j, num_candidates, rng,
            st);
  return split_plans(tau, planner, num_candidates);
}

}  // namespace mpd
