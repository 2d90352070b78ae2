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

#include <Eigen/Dense>
#include <functional>
#include <utility>
#include <vector>

#include "mpdiffuser/dataset.hpp"
#include "mpdiffuser/rng.hpp"

namespace mpd {

/// Riccati fixed point for x' = Ax + Bu with stage cost x'Qx + u'Ru.
/// Iterates until ||P - f(P)||_inf < tol. Returns (P, K_gain) with
/// K_gain = -(R + B'PB)^{-1} B'PA, so the optimal feedback is u = K_gain x.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> solve_dare(
    const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q,
    const Eigen::MatrixXd& R, double tol = 1e-10, int max_iters = 100000);

/// Discretized double integrator (exact zero-order hold at dt) with LQR
/// weights and the infinite-horizon solution baked in at construction.
struct LinearSystemSpec {
  Eigen::MatrixXd A;       // 2x2
  Eigen::MatrixXd B;       // 2x1
  Eigen::MatrixXd Q;       // identity
  Eigen::MatrixXd R;       // 0.1 * identity
  Eigen::MatrixXd P;       // DARE solution
  Eigen::MatrixXd K_gain;  // u = K_gain x
  double dt = 0.1;
  int episode_length = 200;

  static LinearSystemSpec make_double_integrator();

  int state_dim() const { return static_cast<int>(A.rows()); }
  int action_dim() const { return static_cast<int>(B.cols()); }
};

struct LinearStepResult {
  Eigen::VectorXd next_state;
  double reward;  // -(x'Qx + u'Ru)
};

LinearStepResult step_linear(const LinearSystemSpec& spec, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& u);

/// Velocity-limited double integrator: unit step cost whenever |v| > v_max.
struct ConstrainedIntegratorSpec {
  LinearSystemSpec base;
  double v_max = 1.0;
  double budget = 10.0;

  double step_cost(const Eigen::VectorXd& x) const {
    return std::abs(x(1)) > v_max ? 1.0 : 0.0;
  }
};

/// Stochastic LQR expert: u = K x + d w, d ~ Bernoulli(p), w ~ N(0, std^2 I).
struct ExpertConfig {
  double noise_prob = 0.1;
  double noise_std = 0.25;
  double init_box = 2.0;  // x0 ~ U[-box, box]^n
  int num_trajectories = 1000;
};

/// 5-dim kinematic bicycle: state (x, y, heading, speed, steering angle),
/// control (acceleration, steering rate).
struct BicycleSpec {
  double wheelbase = 1.0;
  double dt = 0.1;
  double accel_limit = 1.5;
  double steer_rate_limit = 1.0;
  double steer_limit = 0.6;
  double speed_min = 0.0;
  double speed_max = 3.0;
  double goal_radius = 1.0;
  double workspace = 4.0;  // start positions live in [-workspace/2, workspace/2]^2
  // Slightly longer than the planning horizon so training slices can start
  // at several offsets while still ending after the expert has reached the
  // goal and stopped.
  int episode_length = 80;

  static constexpr int kStateDim = 5;
  static constexpr int kActionDim = 2;
};

/// RK4 step of the bicycle kinematics with control and state clamping.
Eigen::VectorXd step_bicycle(const BicycleSpec& spec, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& u);

/// A three-corner "U" reference path plus its start pose and goal position.
struct BicycleTask {
  std::vector<Eigen::Vector2d> waypoints;  // densified polyline
  Eigen::VectorXd start_state;             // 5-dim
  Eigen::Vector2d goal;
};

BicycleTask sample_bicycle_task(const BicycleSpec& spec, Rng& rng);

/// Pure pursuit steering + proportional speed tracking along a task path.
Eigen::VectorXd bicycle_expert_action(const BicycleSpec& spec, const BicycleTask& task,
                                      const Eigen::VectorXd& x);

/// Expert dataset for the (optionally constrained) linear system. Episode tag
/// is the final state (the conditioning target).
Dataset generate_linear_dataset(const LinearSystemSpec& spec, const ExpertConfig& expert,
                                Rng& rng, const ConstrainedIntegratorSpec* constrained = nullptr);

/// Bicycle dataset: expert trajectories on sampled U-paths plus random-action
/// rollouts, all tagged with the goal position.
Dataset generate_bicycle_dataset(const BicycleSpec& spec, int num_expert, int num_random,
                                 Rng& rng);

/// Open-loop transition residual: simulate traj's actions from x0 with the
/// deterministic step and return ||x_t^sim - x_t^traj|| for t = 1..T.
Eigen::VectorXd dynamics_consistency(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)>& step,
    const Trajectory& traj);

}  // namespace mpd
