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
#include <string>
#include <vector>

#include "mpdiffuser/dataset.hpp"
#include "mpdiffuser/net.hpp"
#include "mpdiffuser/schedule.hpp"

namespace mpd {

enum class Role : std::uint32_t { kPlanner = 0, kDynamics = 1 };

struct DenoiserConfig {
  Role role = Role::kPlanner;
  int state_dim = 0;
  int action_dim = 0;
  int horizon = 0;    // H
  int num_steps = 0;  // K
  int channels = 32;
  int blocks = 2;
  int kernel = 5;
  int groups = 8;
  int embed_dim = 64;
  int time_dim = 16;
  int y_dim = 0;
  YKind y_kind = YKind::kFinalState;
  bool film_x0 = true;          // false = inpainting variant (no x0 FiLM input)
  bool unconditional_y = false;  // dynamics-conditioning ablation

  int in_channels() const { return state_dim + action_dim; }
  int out_channels() const {
    return role == Role::kPlanner ? state_dim + action_dim : state_dim;
  }
};

/// A conditional temporal denoiser (planner or dynamics role) together with
/// the data normalizer it was trained under.
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& config, Rng& rng);
  Denoiser(const DenoiserConfig& config);  // zero weights (loading path)

  const DenoiserConfig& config() const { return config_; }
  Net<float>& net() { return net_; }
  const Net<float>& net() const { return net_; }
  Normalizer& normalizer() { return norm_; }
  const Normalizer& normalizer() const { return norm_; }

  /// Batched prediction in normalized coordinates. x is the concatenated
  /// [state; action] block, (state_dim+action_dim) x (H*B). Output channel
  /// count depends on the role. Pure; safe for concurrent use.
  Eigen::MatrixXf predict_batch(const Eigen::MatrixXf& x, const std::vector<int>& k,
                                const Eigen::MatrixXf& x0, const Eigen::MatrixXf& y,
                                const std::vector<unsigned char>& null_flag) const;

  /// Single-sample prediction over separate state/action blocks.
  Eigen::MatrixXf predict(const Eigen::MatrixXf& tau_x, const Eigen::MatrixXf& tau_u,
                          int k, const Conditioning& cond, bool use_null) const;

 private:
  DenoiserConfig config_;
  Net<float> net_;
  Normalizer norm_;
};

/// Role-checked entry points.
Eigen::MatrixXf planner_predict(const Denoiser& model, const Eigen::MatrixXf& tau_x,
                                const Eigen::MatrixXf& tau_u, int k,
                                const Conditioning& cond, bool use_null);
Eigen::MatrixXf dynamics_predict(const Denoiser& model, const Eigen::MatrixXf& tau_x,
                                 const Eigen::MatrixXf& tau_u, int k,
                                 const Conditioning& cond, bool use_null);

struct TrainConfig {
  double learning_rate = 2e-4;
  int batch_size = 64;
  int total_steps = 100000;
  double ema_decay = 0.005;    // per-update blend toward the live weights
  double cond_dropout = 0.25;  // probability of the null pathway per sample
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
};

/// Adam + EMA training loop state. One training step: sample k and eps per
/// batch element, apply conditional dropout, minimize the role-appropriate
/// mean-squared noise-prediction error, update EMA shadow weights.
class Trainer {
 public:
  Trainer(Denoiser& model, const TrainConfig& config);

  double step(const std::vector<TrainSample>& batch, const NoiseSchedule& schedule,
              Rng& rng);

  const ParamStore<float>& ema() const { return ema_; }
  std::int64_t steps_done() const { return step_count_; }

 private:
  Denoiser& model_;
  TrainConfig config_;
  ParamStore<float> ema_;
  std::vector<Eigen::MatrixXf> adam_m_, adam_v_;
  std::int64_t step_count_ = 0;
};

/// Compares analytic gradients of the training loss against central finite
/// differences (step 1e-4) on a random coordinate subset, running the same
/// network code in double precision. Returns the max relative error.
double gradient_check(const Denoiser& model, const std::vector<TrainSample>& batch,
                      const NoiseSchedule& schedule, std::uint64_t seed = 7,
                      int num_coords = 64);

/// Self-describing binary checkpoint: magic, version, metadata block, then
/// named float32 arrays (live weights and EMA shadow).
void save_checkpoint(const Denoiser& model, const ParamStore<float>& ema,
                     const NoiseSchedule& schedule, std::uint64_t config_hash,
                     const std::string& path);

struct LoadedCheckpoint {
  Denoiser model;      // live weights
  Denoiser ema_model;  // EMA weights (evaluation uses these)
  NoiseSchedule schedule;
  std::uint64_t config_hash = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

/// Throws a descriptive error when the checkpoint does not match the
/// environment/sampler dimensions.
void check_checkpoint_dims(const Denoiser& model, int state_dim, int action_dim,
                           int horizon);

}  // namespace mpd
