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

#include "mpdiffuser/rng.hpp"

namespace mpd {

/// One episode: aligned states x_{0:T}, actions u_{0:T-1}, per-step rewards
/// and cost vectors, plus a terminal/goal tag.
struct Trajectory {
  Eigen::MatrixXf states;   // state_dim x (T+1)
  Eigen::MatrixXf actions;  // action_dim x T
  Eigen::VectorXf rewards;  // T
  Eigen::MatrixXf costs;    // cost_dim x T (0 rows when costless)
  Eigen::VectorXf tag;      // final state or goal position

  int length() const { return static_cast<int>(actions.cols()); }
  double episode_return() const { return rewards.sum(); }
  double episode_cost() const { return costs.size() > 0 ? double(costs.sum()) : 0.0; }
};

void validate(const Trajectory& traj);  // length consistency, finiteness

/// How the conditioning vector y(tau) is derived from an episode.
enum class YKind : std::uint32_t {
  kFinalState = 0,    // y = tag (full terminal state)
  kGoalPosition = 1,  // y = tag (2-d goal position)
  kReturnCost = 2,    // y = (normalized return-to-go, normalized cost-to-go)
};

struct Dataset {
  std::vector<Trajectory> episodes;
  int state_dim = 0;
  int action_dim = 0;
  int cost_dim = 0;
  int tag_dim = 0;
  YKind y_kind = YKind::kFinalState;
  std::uint64_t env_hash = 0;
  std::uint64_t generator_seed = 0;
};

/// Per-dimension affine normalization for states/actions plus min-max
/// constants for episode returns and costs.
struct Normalizer {
  Eigen::VectorXf state_shift, state_scale;    // scale > 0, floored
  Eigen::VectorXf action_shift, action_scale;
  double return_min = 0.0, return_max = 1.0;
  double cost_min = 0.0, cost_max = 1.0;

  Eigen::MatrixXf normalize_states(const Eigen::MatrixXf& x) const;
  Eigen::MatrixXf denormalize_states(const Eigen::MatrixXf& x) const;
  Eigen::MatrixXf normalize_actions(const Eigen::MatrixXf& u) const;
  Eigen::MatrixXf denormalize_actions(const Eigen::MatrixXf& u) const;
  double normalize_return(double r) const;
  double normalize_cost(double c) const;

  /// Tag in the same units as the leading state dimensions.
  Eigen::VectorXf normalize_tag(const Eigen::VectorXf& tag) const;
};

Normalizer fit_normalizer(const Dataset& dataset);

/// Conditioning payload seen by the denoisers: everything in normalized units.
struct Conditioning {
  Eigen::VectorXf x0;
  Eigen::VectorXf y;
  bool null_flag = false;  // when set, y is replaced by the learned null token
};

/// Planning-horizon slice: states x_{t0+1 : t0+H} (or x_{t0 : t0+H-1} in
/// inpainting mode), actions u_{t0 : t0+H-1}, normalized.
struct TrainSample {
  Eigen::MatrixXf states;   // state_dim x H
  Eigen::MatrixXf actions;  // action_dim x H
  Conditioning cond;
};

/// Uniform random (episode, offset) slices. Episodes shorter than H are
/// skipped with a one-time warning; throws if nothing remains.
/// Goal-position datasets are sliced in the frame of the conditioning state:
/// position rows of states and the goal tag are relative to x_{t0}, and the
/// x0 position entries are zero. Callers that sample plans for such tasks
/// must apply the same shift to the conditioning and undo it on the output.
std::vector<TrainSample> slice_training_batch(const Dataset& dataset,
                                              const Normalizer& norm, int horizon,
                                              int batch_size, Rng& rng,
                                              bool inpaint_mode = false);

/// MPDTRAJ1 binary container: magic, little-endian header with 64-bit counts,
/// an episode index table, then contiguous float32 episode records.
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Declared on-disk size in bytes for the given dataset (layout oracle).
std::uint64_t dataset_file_size(const Dataset& dataset);

/// Debug export, one step per line.
void export_dataset_text(const Dataset& dataset, const std::string& path);

/// Gaussian state-measurement corruption for the robustness ablation; returns
/// a transformed copy (the planner keeps the clean one).
Dataset corrupt_states(const Dataset& dataset, double noise_std, Rng& rng);

}  // namespace mpd
