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

#include "mpdiffuser/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mpdiffuser/errors.hpp"

namespace mpd {

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> solve_dare(
    const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q,
    const Eigen::MatrixXd& R, double tol, int max_iters) {
  Eigen::MatrixXd P = Q;
  double residual = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::MatrixXd BtP = B.transpose() * P;
    const Eigen::MatrixXd gain_inv = R + BtP * B;
    const Eigen::MatrixXd next =
        Q + A.transpose() * P * A -
        A.transpose() * P * B * gain_inv.ldlt().solve(BtP * A);
    residual = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (residual < tol) {
      Eigen::MatrixXd K = -gain_inv.ldlt().solve(B.transpose() * P * A);
      return {P, K};
    }
  }
  throw NumericalError("DARE did not converge; last residual = " +
                       std::to_string(residual));
}

LinearSystemSpec LinearSystemSpec::make_double_integrator() {
  LinearSystemSpec s;
  const double dt = 0.1;
  // Exact zero-order-hold discretization of the continuous double integrator.
  s.A.resize(2, 2);
  s.A << 1.0, dt, 0.0, 1.0;
  s.B.resize(2, 1);
  s.B << 0.5 * dt * dt, dt;
  s.Q = Eigen::MatrixXd::Identity(2, 2);
  s.R = 0.1 * Eigen::MatrixXd::Identity(1, 1);
  s.dt = dt;
  s.episode_length = 200;
  std::tie(s.P, s.K_gain) = solve_dare(s.A, s.B, s.Q, s.R);
  return s;
}

LinearStepResult step_linear(const LinearSystemSpec& spec, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& u) {
  if (x.size() != spec.state_dim() || u.size() != spec.action_dim())
    throw UsageError("step_linear: dimension mismatch");
  LinearStepResult r;
  r.next_state = spec.A * x + spec.B * u;
  r.reward = -(x.dot(spec.Q * x) + u.dot(spec.R * u));
  return r;
}

namespace {
Eigen::VectorXd bicycle_deriv(const BicycleSpec& spec, const Eigen::VectorXd& x,
                              const Eigen::VectorXd& u) {
  Eigen::VectorXd dx(5);
  const double theta = x(2), v = x(3), delta = x(4);
  dx << v * std::cos(theta), v * std::sin(theta), v * std::tan(delta) / spec.wheelbase,
      u(0), u(1);
  return dx;
}
}  // namespace

Eigen::VectorXd step_bicycle(const BicycleSpec& spec, const Eigen::VectorXd& x,
                             const Eigen::VectorXd& u) {
  if (x.size() != BicycleSpec::kStateDim || u.size() != BicycleSpec::kActionDim)
    throw UsageError("step_bicycle: dimension mismatch");
  Eigen::VectorXd uc(2);
  uc << std::clamp(u(0), -spec.accel_limit, spec.accel_limit),
      std::clamp(u(1), -spec.steer_rate_limit, spec.steer_rate_limit);

  const double h = spec.dt;
  const Eigen::VectorXd k1 = bicycle_deriv(spec, x, uc);
  const Eigen::VectorXd k2 = bicycle_deriv(spec, x + 0.5 * h * k1, uc);
  const Eigen::VectorXd k3 = bicycle_deriv(spec, x + 0.5 * h * k2, uc);
  const Eigen::VectorXd k4 = bicycle_deriv(spec, x + h * k3, uc);
  Eigen::VectorXd next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

  next(3) = std::clamp(next(3), spec.speed_min, spec.speed_max);
  next(4) = std::clamp(next(4), -spec.steer_limit, spec.steer_limit);
  return next;
}

BicycleTask sample_bicycle_task(const BicycleSpec& spec, Rng& rng) {
  BicycleTask task;
  const double w = spec.workspace;

  // Start pose in the inner half of the workspace, heading uniform.
  Eigen::Vector2d start(rng.uniform() * w - w / 2.0, rng.uniform() * w - w / 2.0);
  const double theta0 = rng.uniform() * 2.0 * M_PI - M_PI;

  // U-shape from three legs: forward along the heading, a lateral leg, then
  // doubling back. Leg lengths keep the total path within what the speed
  // limit allows inside one episode, so every sampled task is feasible.
  const double leg1 = 1.0 + 1.0 * rng.uniform();
  // The lateral leg stays above the minimum turning diameter so the U-turn
  // is always feasible without overshoot.
  const double width = 1.5 + 1.0 * rng.uniform();
  const double leg2 = 1.0 + 1.0 * rng.uniform();
  const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
  const Eigen::Vector2d fwd(std::cos(theta0), std::sin(theta0));
  const Eigen::Vector2d lat(-side * fwd.y(), side * fwd.x());

  std::vector<Eigen::Vector2d> corners = {start, start + leg1 * fwd,
                                          start + leg1 * fwd + width * lat,
                                          start + (leg1 - leg2) * fwd + width * lat};
  // Densify the polyline so pure pursuit always has a nearby target.
  const double ds = 0.25;
  for (std::size_t i = 0; i + 1 < corners.size(); ++i) {
    const Eigen::Vector2d a = corners[i], b = corners[i + 1];
    const int n = std::max(1, static_cast<int>(std::ceil((b - a).norm() / ds)));
    for (int j = 0; j < n; ++j) task.waypoints.push_back(a + (b - a) * (double(j) / n));
  }
  task.waypoints.push_back(corners.back());

  task.start_state.resize(5);
  task.start_state << start.x(), start.y(), theta0, 0.8 + 0.4 * rng.uniform(), 0.0;
  task.goal = corners.back();
  return task;
}

Eigen::VectorXd bicycle_expert_action(const BicycleSpec& spec, const BicycleTask& task,
                                      const Eigen::VectorXd& x) {
  const Eigen::Vector2d pos(x(0), x(1));
  const double theta = x(2), v = x(3), delta = x(4);

  // Lookahead target: first waypoint beyond the lookahead radius, searching
  // from the closest point forward.
  const double lookahead = 1.2;
  std::size_t nearest = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < task.waypoints.size(); ++i) {
    const double d = (task.waypoints[i] - pos).norm();
    if (d < best) {
      best = d;
      nearest = i;
    }
  }
  Eigen::Vector2d target = task.waypoints.back();
  for (std::size_t i = nearest; i < task.waypoints.size(); ++i) {
    if ((task.waypoints[i] - pos).norm() >= lookahead) {
      target = task.waypoints[i];
      break;
    }
  }

  const Eigen::Vector2d to_target = target - pos;
  const double alpha = std::atan2(to_target.y(), to_target.x()) - theta;
  const double wrapped = std::atan2(std::sin(alpha), std::cos(alpha));
  const double ld = std::max(to_target.norm(), 0.5);
  const double delta_des =
      std::clamp(std::atan2(2.0 * spec.wheelbase * std::sin(wrapped), ld),
                 -spec.steer_limit, spec.steer_limit);

  // Slow to rest at the final goal so episode endpoints coincide with it;
  // a nonzero floor would leave the vehicle orbiting the goal at the
  // minimum turn radius.
  const double dist_goal = (task.goal - pos).norm();
  const double v_des = std::min(1.5, 1.2 * dist_goal);

  Eigen::VectorXd u(2);
  u << std::clamp(2.0 * (v_des - v), -spec.accel_limit, spec.accel_limit),
      std::clamp(4.0 * (delta_des - delta), -spec.steer_rate_limit,
                 spec.steer_rate_limit);
  return u;
}

Dataset generate_linear_dataset(const LinearSystemSpec& spec, const ExpertConfig& expert,
                                Rng& rng, const ConstrainedIntegratorSpec* constrained) {
  if (expert.noise_prob > 0.0 && expert.noise_std <= 0.0)
    throw ConfigError("expert noise_std must be > 0 when noise_prob > 0");

  Dataset d;
  d.state_dim = spec.state_dim();
  d.action_dim = spec.action_dim();
  d.cost_dim = constrained ? 1 : 0;
  d.tag_dim = d.state_dim;
  d.y_kind = constrained ? YKind::kReturnCost : YKind::kFinalState;
  d.episodes.reserve(expert.num_trajectories);

  const int T = spec.episode_length;
  for (int i = 0; i < expert.num_trajectories; ++i) {
    Trajectory ep;
    ep.states.resize(d.state_dim, T + 1);
    ep.actions.resize(d.action_dim, T);
    ep.rewards.resize(T);
    ep.costs.resize(d.cost_dim, d.cost_dim > 0 ? T : 0);

    Eigen::VectorXd x(d.state_dim);
    for (int j = 0; j < d.state_dim; ++j)
      x(j) = (2.0 * rng.uniform() - 1.0) * expert.init_box;
    ep.states.col(0) = x.cast<float>();

    for (int t = 0; t < T; ++t) {
      Eigen::VectorXd u = spec.K_gain * x;
      if (rng.bernoulli(expert.noise_prob))
        for (int j = 0; j < u.size(); ++j) u(j) += expert.noise_std * rng.normal();
      const auto step = step_linear(spec, x, u);
      ep.actions.col(t) = u.cast<float>();
      ep.rewards(t) = static_cast<float>(step.reward);
      if (constrained) ep.costs(0, t) = static_cast<float>(constrained->step_cost(x));
      x = step.next_state;
      ep.states.col(t + 1) = x.cast<float>();
    }
    ep.tag = ep.states.col(T);
    d.episodes.push_back(std::move(ep));
  }
  return d;
}

Dataset generate_bicycle_dataset(const BicycleSpec& spec, int num_expert, int num_random,
                                 Rng& rng) {
  Dataset d;
  d.state_dim = BicycleSpec::kStateDim;
  d.action_dim = BicycleSpec::kActionDim;
  d.cost_dim = 0;
  d.tag_dim = 2;
  d.y_kind = YKind::kGoalPosition;
  d.episodes.reserve(num_expert + num_random);

  const int T = spec.episode_length;
  auto rollout = [&](const Eigen::VectorXd& x0,
                     const std::function<Eigen::VectorXd(const Eigen::VectorXd&, int)>& policy,
                     const Eigen::Vector2d* fixed_goal) {
    Trajectory ep;
    ep.states.resize(d.state_dim, T + 1);
    ep.actions.resize(d.action_dim, T);
    ep.rewards = Eigen::VectorXf::Zero(T);
    ep.costs.resize(0, 0);
    Eigen::VectorXd x = x0;
    ep.states.col(0) = x.cast<float>();
    for (int t = 0; t < T; ++t) {
      const Eigen::VectorXd u = policy(x, t);
      ep.actions.col(t) = u.cast<float>();
      x = step_bicycle(spec, x, u);
      ep.states.col(t + 1) = x.cast<float>();
    }
    ep.tag.resize(2);
    if (fixed_goal) {
      ep.tag << float(fixed_goal->x()), float(fixed_goal->y());
    } else {
      ep.tag << ep.states(0, T), ep.states(1, T);  // reached position
    }
    d.episodes.push_back(std::move(ep));
  };

  for (int i = 0; i < num_expert; ++i) {
    const BicycleTask task = sample_bicycle_task(spec, rng);
    rollout(task.start_state,
            [&](const Eigen::VectorXd& x, int) { return bicycle_expert_action(spec, task, x); },
            &task.goal);
  }
  for (int i = 0; i < num_random; ++i) {
    const BicycleTask task = sample_bicycle_task(spec, rng);
    rollout(task.start_state,
            [&](const Eigen::VectorXd&, int) {
              Eigen::VectorXd u(2);
              u << (2.0 * rng.uniform() - 1.0) * spec.accel_limit,
                  (2.0 * rng.uniform() - 1.0) * spec.steer_rate_limit;
              return u;
            },
            nullptr);
  }
  return d;
}

Eigen::VectorXd dynamics_consistency(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&, const Eigen::VectorXd&)>& step,
    const Trajectory& traj) {
  const int T = traj.length();
  Eigen::VectorXd profile(T);
  Eigen::VectorXd x = traj.states.col(0).cast<double>();
  for (int t = 0; t < T; ++t) {
    x = step(x, traj.actions.col(t).cast<double>());
    profile(t) = (x - traj.states.col(t + 1).cast<double>()).norm();
  }
  return profile;
}

}  // namespace mpd
