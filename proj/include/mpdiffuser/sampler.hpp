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
#include <cstdint>
#include <functional>
#include <vector>

#include "mpdiffuser/denoiser.hpp"
#include "mpdiffuser/schedule.hpp"

namespace mpd {

enum class SampleMode : std::uint32_t {
  kAlternating = 0,
  kPlannerOnly = 1,
  kCombinedScore = 2,
  kJointBaseline = 3,
};

SampleMode sample_mode_from_string(const std::string& s);
std::string to_string(SampleMode mode);

struct SamplerConfig {
  SampleMode mode = SampleMode::kAlternating;
  double omega = 1.5;       // guidance scale
  double alpha_temp = 0.5;  // noise temperature (initial and per-step)
  double lambda = 1.0;      // combined-score tilt; blended as lambda' below
  int warm_start_steps = -1;  // j; < 0 means replan from scratch
  int k_effective = 0;        // reverse-chain start level; 0 = schedule K

  double lambda_prime() const { return lambda / (1.0 + lambda); }
  void validate() const;  // finiteness/positivity of the fields above
};

/// Denoiser evaluations per CFG pathway per candidate. planner = K for a
/// planner-only chain, planner + dynamics = 2K for an alternating chain.
struct SampleStats {
  std::int64_t planner_evals = 0;
  std::int64_t dynamics_evals = 0;
  std::int64_t total() const { return planner_evals + dynamics_evals; }
};

/// Batched prediction signature matching Denoiser::predict_batch: x is the
/// concatenated [state; action] block of shape (sd+ad) x (H*B).
using PredictFn = std::function<Eigen::MatrixXf(
    const Eigen::MatrixXf& x, const std::vector<int>& k, const Eigen::MatrixXf& x0,
    const Eigen::MatrixXf& y, const std::vector<unsigned char>& null_flag)>;

/// Thin callable view of a denoiser so tests can substitute analytic stubs.
struct DenoiserHandle {
  Role role = Role::kPlanner;
  int state_dim = 0;
  int action_dim = 0;
  int horizon = 0;
  int num_steps = 0;
  bool inpaint = false;  // planner trained without the x0 FiLM input
  Normalizer norm;
  PredictFn predict;
};

DenoiserHandle make_handle(const Denoiser& model);

/// One candidate plan over the horizon, in both coordinate systems. The
/// normalized block is what warm-start replanning re-noises.
struct Plan {
  Eigen::MatrixXf states;   // sd x H, environment units
  Eigen::MatrixXf actions;  // ad x H, environment units
  Eigen::MatrixXf norm_states;
  Eigen::MatrixXf norm_actions;
};

/// Samples num_candidates trajectory plans with one reverse chain, batching
/// all candidates and both CFG pathways into each denoiser call. cond must be
/// in normalized units. dynamics may be null for planner_only/joint_baseline
/// and for combined_score at lambda' = 0.
std::vector<Plan> sample_plans(const DenoiserHandle& planner,
                               const DenoiserHandle* dynamics,
                               const NoiseSchedule& schedule,
                               const SamplerConfig& config, const Conditioning& cond,
                               int num_candidates, Rng& rng,
                               SampleStats* stats = nullptr);

/// Drops the first executed_steps columns and repeats the final state/action
/// to restore the horizon length.
Plan shift_plan(const Plan& previous, int executed_steps);

/// Warm-start replanning: forward-noises the shifted previous plan to level j
/// and runs j reverse steps. j = 0 returns the shifted plan as every
/// candidate; j = K falls back to fresh sampling.
std::vector<Plan> warm_start_resample(const DenoiserHandle& planner,
                                      const DenoiserHandle* dynamics,
                                      const NoiseSchedule& schedule,
                                      const SamplerConfig& config,
                                      const Conditioning& cond, const Plan& previous,
                                      int executed_steps, int j, int num_candidates,
                                      Rng& rng, SampleStats* stats = nullptr);

}  // namespace mpd
