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

#include "mpdiffuser/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "mpdiffuser/errors.hpp"

namespace mpd {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

enum class EnvKind { kLinear, kConstrained, kBicycle };

EnvKind env_kind(const ExperimentConfig& c) {
  if (c.env_name == "double_integrator") return EnvKind::kLinear;
  if (c.env_name == "constrained_integrator") return EnvKind::kConstrained;
  if (c.env_name == "bicycle") return EnvKind::kBicycle;
  throw ConfigError("unknown env.name: " + c.env_name);
}

NoiseSchedule make_sched(const ExperimentConfig& c) {
  if (c.schedule_kind == "auto") return default_schedule(c.num_steps);
  return build_schedule(schedule_kind_from_string(c.schedule_kind), c.num_steps,
                        1e-4, 0.2);
}

std::string fmtd(double d) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

std::string join_vec(const Eigen::VectorXd& v) {
  if (v.size() == 0) return "-";
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += ";";
    s += fmtd(v(i));
  }
  return s;
}

DenoiserConfig make_denoiser_config(const ExperimentConfig& c, const Dataset& data,
                                    Role role, bool inpaint_variant) {
  DenoiserConfig dc;
  dc.role = role;
  dc.state_dim = data.state_dim;
  dc.action_dim = data.action_dim;
  dc.horizon = c.horizon;
  dc.num_steps = c.num_steps;
  dc.channels = c.channels;
  dc.blocks = c.blocks;
  dc.kernel = c.kernel;
  dc.groups = c.groups;
  dc.embed_dim = c.embed_dim;
  dc.time_dim = c.time_dim;
  dc.y_kind = data.y_kind;
  dc.y_dim = data.y_kind == YKind::kReturnCost ? 2 : data.tag_dim;
  dc.film_x0 = role == Role::kPlanner ? (c.film_x0 && !inpaint_variant) : true;
  dc.unconditional_y = role == Role::kDynamics && !c.dynamics_conditional;
  return dc;
}

/// Environment-side constants for evaluation.
struct EnvBundle {
  EnvKind kind;
  LinearSystemSpec lin;
  ConstrainedIntegratorSpec cons;
  BicycleSpec bike;
  int state_dim = 0, action_dim = 0, episode_length = 0, cost_dim = 0;
};

EnvBundle make_env(const ExperimentConfig& c) {
  EnvBundle e;
  e.kind = env_kind(c);
  if (e.kind == EnvKind::kBicycle) {
    e.state_dim = BicycleSpec::kStateDim;
    e.action_dim = BicycleSpec::kActionDim;
    e.episode_length = e.bike.episode_length;
    e.cost_dim = 0;
  } else {
    e.lin = LinearSystemSpec::make_double_integrator();
    e.cons.base = e.lin;
    e.cons.budget = c.budget;
    e.state_dim = e.lin.state_dim();
    e.action_dim = e.lin.action_dim();
    e.episode_length = e.lin.episode_length;
    e.cost_dim = e.kind == EnvKind::kConstrained ? 1 : 0;
  }
  return e;
}

/// Loaded checkpoints plus sampler handles bound to their EMA weights.
struct EvalModels {
  LoadedCheckpoint planner;
  std::optional<LoadedCheckpoint> dynamics;
  DenoiserHandle planner_handle;
  std::optional<DenoiserHandle> dynamics_handle;
  NoiseSchedule schedule;
};

bool needs_dynamics(const SamplerConfig& s) {
  return s.mode == SampleMode::kAlternating ||
         (s.mode == SampleMode::kCombinedScore && s.lambda_prime() > 0.0);
}

EvalModels load_models(const ExperimentConfig& c, const EnvBundle& env) {
  const std::string planner_which =
      c.sampler.mode == SampleMode::kJointBaseline ? "joint" : "planner";
  EvalModels m{load_checkpoint(checkpoint_path(c, planner_which)), std::nullopt,
               {}, std::nullopt, {}};
  check_checkpoint_dims(m.planner.ema_model, env.state_dim, env.action_dim,
                        c.horizon);
  if (m.planner.ema_model.config().num_steps != c.num_steps)
    throw ConfigError("checkpoint mismatch: schedule steps expected " +
                      std::to_string(c.num_steps) + ", found " +
                      std::to_string(m.planner.ema_model.config().num_steps));
  m.schedule = m.planner.schedule;
  m.planner_handle = make_handle(m.planner.ema_model);

  if (needs_dynamics(c.sampler)) {
    m.dynamics = load_checkpoint(checkpoint_path(c, "dynamics"));
    check_checkpoint_dims(m.dynamics->ema_model, env.state_dim, env.action_dim,
                          c.horizon);
    m.dynamics_handle = make_handle(m.dynamics->ema_model);
  }
  return m;
}

Eigen::VectorXf to_f(const Eigen::VectorXd& v) { return v.cast<float>(); }

/// Open-loop residual of a plan executed from the true current state.
Eigen::VectorXd plan_consistency(
    const EnvBundle& env, const Eigen::VectorXd& x_start, const Plan& plan) {
  Trajectory traj;
  const int H = static_cast<int>(plan.states.cols());
  traj.states.resize(plan.states.rows(), H + 1);
  traj.states.col(0) = x_start.cast<float>();
  traj.states.rightCols(H) = plan.states;
  traj.actions = plan.actions;
  traj.rewards = Eigen::VectorXf::Zero(H);
  auto step = [&env](const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
    return env.kind == EnvKind::kBicycle
               ? step_bicycle(env.bike, x, u)
               : step_linear(env.lin, x, u).next_state;
  };
  return dynamics_consistency(step, traj);
}

struct PlannerLoop {
  const ExperimentConfig& cfg;
  const EnvBundle& env;
  const EvalModels& models;
  Rng sampler_rng;
  SampleStats stats;
  Plan current;
  bool have_plan = false;

  PlannerLoop(const ExperimentConfig& c, const EnvBundle& e, const EvalModels& m,
              std::uint64_t seed)
      : cfg(c), env(e), models(m), sampler_rng(seed) {}

  /// Draws candidates (fresh or warm-started) and returns them. When
  /// frame_origin is set (goal-position tasks plan relative to the current
  /// position), the previous plan is re-expressed in the new frame before
  /// warm starting and outputs are shifted back to world coordinates.
  std::vector<Plan> propose(const Conditioning& cond, int executed_steps,
                            const Eigen::Vector2f* frame_origin = nullptr) {
    const DenoiserHandle* dyn =
        models.dynamics_handle ? &*models.dynamics_handle : nullptr;
    const Normalizer& norm = models.planner.ema_model.normalizer();
    std::vector<Plan> plans;
    if (have_plan && cfg.sampler.warm_start_steps >= 0) {
      if (frame_origin) {
        Eigen::MatrixXf st = current.states;
        st.topRows(2).colwise() -= *frame_origin;
        current.norm_states = norm.normalize_states(st);
      }
      plans = warm_start_resample(models.planner_handle, dyn, models.schedule,
                                  cfg.sampler, cond, current, executed_steps,
                                  cfg.sampler.warm_start_steps, cfg.num_candidates,
                                  sampler_rng, &stats);
    } else {
      plans = sample_plans(models.planner_handle, dyn, models.schedule, cfg.sampler,
                           cond, cfg.num_candidates, sampler_rng, &stats);
    }
    if (frame_origin)
      for (Plan& p : plans) p.states.topRows(2).colwise() += *frame_origin;
    return plans;
  }
};

EpisodeRecord eval_linear_episode(const ExperimentConfig& cfg, const EnvBundle& env,
                                  const EvalModels& models, int index,
                                  std::uint64_t seed) {
  const auto t_start = Clock::now();
  const bool constrained = env.kind == EnvKind::kConstrained;
  const int H = cfg.horizon;
  const int chunk = cfg.open_loop || cfg.chunk == 0 ? H : cfg.chunk;
  const int T = cfg.open_loop ? std::min(env.episode_length, H) : env.episode_length;
  const Normalizer& norm = models.planner.ema_model.normalizer();

  Rng env_rng(seed);
  Eigen::VectorXd x(env.state_dim);
  for (int j = 0; j < env.state_dim; ++j)
    x(j) = (2.0 * env_rng.uniform() - 1.0) * 2.0;  // expert's init box

  // Oracle baseline: deterministic LQR from the same start.
  double baseline = 0.0;
  {
    Eigen::VectorXd xb = x;
    for (int t = 0; t < T; ++t) {
      const Eigen::VectorXd u = env.lin.K_gain * xb;
      const auto step = step_linear(env.lin, xb, u);
      baseline += -step.reward;
      xb = step.next_state;
    }
  }

  BudgetSpec budget;
  if (constrained) {
    budget.budget = Eigen::VectorXd::Constant(1, cfg.budget);
    budget.remaining = budget.budget;
    budget.gamma = cfg.gamma;
    budget.return_scale = cfg.return_scale;
    budget.cost_scale = cfg.cost_scale;
    budget.num_candidates = cfg.num_candidates;
    budget.validate();
  }
  const StepModel reward_model = [&env](const Eigen::VectorXf& xs,
                                        const Eigen::VectorXf& us) {
    const Eigen::VectorXd xd = xs.cast<double>(), ud = us.cast<double>();
    return -(xd.dot(env.lin.Q * xd) + ud.dot(env.lin.R * ud));
  };
  const std::vector<StepModel> cost_models =
      constrained ? std::vector<StepModel>{[&env](const Eigen::VectorXf& xs,
                                                  const Eigen::VectorXf&) {
        return env.cons.step_cost(xs.cast<double>());
      }}
                  : std::vector<StepModel>{};

  PlannerLoop loop(cfg, env, models, seed ^ 0x73a9d1c25ef0b841ull);
  EpisodeRecord rec;
  rec.index = index;
  rec.seed = seed;
  rec.realized_cost = Eigen::VectorXd::Zero(env.cost_dim);
  rec.baseline_cost = baseline;

  Eigen::VectorXd obs = x;  // measurement used for conditioning
  int exec_idx = 0;
  for (int t = 0; t < T; ++t) {
    if (!loop.have_plan || exec_idx >= chunk) {
      Conditioning cond;
      cond.x0 = norm.normalize_states(to_f(obs)).col(0);
      if (constrained) {
        cond.y.resize(2);
        cond.y(0) = static_cast<float>(cfg.return_scale * 1.0);
        cond.y(1) = static_cast<float>(cfg.cost_scale *
                                       norm.normalize_cost(budget.remaining(0)));
      } else {
        cond.y = norm.normalize_tag(Eigen::VectorXf::Zero(env.state_dim));
      }

      const std::vector<Plan> plans = loop.propose(cond, exec_idx);
      int best = 0;
      if (constrained) {
        std::vector<ScoredCandidate> scored;
        scored.reserve(plans.size());
        for (std::size_t i = 0; i < plans.size(); ++i) {
          auto [j_hat, c_hat] = score(plans[i].states, plans[i].actions,
                                      reward_model, cost_models, cfg.gamma);
          scored.push_back(make_scored(static_cast<int>(i), j_hat,
                                       std::move(c_hat), budget.remaining));
        }
        best = select_budget_aware(scored);
        // Instrumented Alg. 2 guarantee: a feasible pick whenever one exists.
        const bool any_feasible = std::any_of(
            scored.begin(), scored.end(),
            [](const ScoredCandidate& s) { return s.feasible; });
        if (any_feasible && !scored[static_cast<std::size_t>(best)].feasible)
          throw NumericalError("budget-aware selection violated feasibility");
      } else {
        std::vector<double> rho;
        rho.reserve(plans.size());
        for (const Plan& p : plans)
          rho.push_back(-static_cast<double>(p.states.col(H - 1).norm()));
        best = rank_generic(rho);
      }
      loop.current = plans[static_cast<std::size_t>(best)];
      if (!loop.have_plan) rec.consistency = plan_consistency(env, x, loop.current);
      loop.have_plan = true;
      exec_idx = 0;
    }

    const Eigen::VectorXd u = loop.current.actions.col(exec_idx).cast<double>();
    if (constrained) {
      const Eigen::VectorXd step_c =
          Eigen::VectorXd::Constant(1, env.cons.step_cost(x));
      rec.realized_cost += step_c;
      update_remaining_budget(budget, step_c);
    }
    const auto step = step_linear(env.lin, x, u);
    rec.realized_return += step.reward;
    x = step.next_state;
    obs = x;
    if (cfg.dynamics_noise_std > 0.0)
      for (int j = 0; j < env.state_dim; ++j)
        obs(j) += cfg.dynamics_noise_std * env_rng.normal();
    ++exec_idx;
  }

  rec.success = !constrained || (rec.realized_cost.array() <=
                                 budget.budget.array() + 1e-9).all();
  rec.denoiser_evals = loop.stats.total();
  rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t_start).count();
  return rec;
}

EpisodeRecord eval_bicycle_episode(const ExperimentConfig& cfg, const EnvBundle& env,
                                   const EvalModels& models, int index,
                                   std::uint64_t seed) {
  const auto t_start = Clock::now();
  const int H = cfg.horizon;
  const int chunk = cfg.open_loop || cfg.chunk == 0 ? H : cfg.chunk;
  const int T = std::min(env.episode_length, cfg.open_loop ? H : env.episode_length);
  const Normalizer& norm = models.planner.ema_model.normalizer();

  Rng env_rng(seed);
  const BicycleTask task = sample_bicycle_task(env.bike, env_rng);
  Eigen::VectorXd x = task.start_state;

  Eigen::VectorXf goal_tag(2);
  goal_tag << static_cast<float>(task.goal.x()), static_cast<float>(task.goal.y());

  PlannerLoop loop(cfg, env, models, seed ^ 0x73a9d1c25ef0b841ull);
  EpisodeRecord rec;
  rec.index = index;
  rec.seed = seed;
  rec.realized_cost = Eigen::VectorXd::Zero(0);
  rec.baseline_cost = 0.0;

  Eigen::VectorXd obs = x;
  double min_dist = (x.head(2) - task.goal).norm();
  int exec_idx = 0;
  for (int t = 0; t < T; ++t) {
    if (!loop.have_plan || exec_idx >= chunk) {
      // Plan in the frame of the current position; see slice_training_batch.
      const Eigen::Vector2f origin = to_f(obs).head(2);
      Eigen::VectorXf x0_local = to_f(obs);
      x0_local.head(2).setZero();
      Conditioning cond;
      cond.x0 = norm.normalize_states(x0_local).col(0);
      cond.y = norm.normalize_tag(goal_tag - Eigen::VectorXf(origin));
      const std::vector<Plan> plans = loop.propose(cond, exec_idx, &origin);
      std::vector<double> rho;
      rho.reserve(plans.size());
      for (const Plan& p : plans) {
        // Score = closest approach of the planned positions to the goal,
        // matching the episode success criterion.
        double closest = std::numeric_limits<double>::infinity();
        for (int h = 0; h < H; ++h) {
          const Eigen::Vector2d pos = p.states.col(h).head(2).cast<double>();
          closest = std::min(closest, (pos - task.goal).norm());
        }
        rho.push_back(-closest);
      }
      loop.current = plans[static_cast<std::size_t>(rank_generic(rho))];
      if (!loop.have_plan) rec.consistency = plan_consistency(env, x, loop.current);
      loop.have_plan = true;
      exec_idx = 0;
    }

    const Eigen::VectorXd u = loop.current.actions.col(exec_idx).cast<double>();
    x = step_bicycle(env.bike, x, u);
    obs = x;
    if (cfg.dynamics_noise_std > 0.0)
      for (int j = 0; j < BicycleSpec::kStateDim; ++j)
        obs(j) += cfg.dynamics_noise_std * env_rng.normal();
    const double dist = (x.head(2) - task.goal).norm();
    min_dist = std::min(min_dist, dist);
    rec.realized_return += -dist;
    ++exec_idx;
  }

  rec.success = min_dist <= env.bike.goal_radius;
  rec.denoiser_evals = loop.stats.total();
  rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t_start).count();
  return rec;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int i, int j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k)
      r[static_cast<std::size_t>(idx[k])] = static_cast<double>(k);
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) { ma += ra[i]; mb += rb[i]; }
  ma /= n; mb /= n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::max(std::sqrt(da * db), 1e-12);
}

}  // namespace

void compute_aggregates(RolloutReport& r) {
  const double n = static_cast<double>(r.episodes.size());
  if (r.episodes.empty()) throw UsageError("report has no episodes");

  double sum_ret = 0.0, sum_sq = 0.0, sum_base = 0.0, sum_evals = 0.0;
  int successes = 0;
  Eigen::VectorXd cost_sum = Eigen::VectorXd::Zero(r.episodes[0].realized_cost.size());
  Eigen::VectorXd prof_sum;
  int prof_count = 0;
  for (const auto& e : r.episodes) {
    sum_ret += e.realized_return;
    sum_sq += e.realized_return * e.realized_return;
    sum_base += e.baseline_cost;
    sum_evals += static_cast<double>(e.denoiser_evals);
    successes += e.success ? 1 : 0;
    cost_sum += e.realized_cost;
    if (e.consistency.size() > 0) {
      if (prof_sum.size() == 0) prof_sum = Eigen::VectorXd::Zero(e.consistency.size());
      prof_sum += e.consistency;
      ++prof_count;
    }
  }
  r.mean_return = sum_ret / n;
  r.std_return = std::sqrt(std::max(0.0, sum_sq / n - r.mean_return * r.mean_return));
  r.mean_cost = cost_sum / n;
  r.success_rate = static_cast<double>(successes) / n;
  r.mean_baseline_cost = sum_base / n;
  // Table-8 convention: realized quadratic cost over the oracle's, as a ratio
  // of means. Realized cost is the negated reward sum.
  r.normalized_cost = sum_base > 0.0 ? -sum_ret / sum_base : 0.0;
  r.mean_consistency =
      prof_count > 0 ? Eigen::VectorXd(prof_sum / prof_count) : Eigen::VectorXd();
  r.mean_evals = sum_evals / n;
}

std::string dataset_path(const ExperimentConfig& c) {
  return c.out_dir + "/dataset.bin";
}

std::string checkpoint_path(const ExperimentConfig& c, const std::string& which) {
  if (which != "planner" && which != "dynamics" && which != "joint")
    throw UsageError("unknown checkpoint kind: " + which);
  return c.out_dir + "/" + which + ".ckpt";
}

void run_gen_data(const ExperimentConfig& c) {
  fs::create_directories(c.out_dir);
  Rng rng = Rng(c.seed).stream(1);
  Dataset data;
  if (env_kind(c) == EnvKind::kBicycle) {
    const EnvBundle env = make_env(c);
    const int num_random = std::max(1, c.num_trajectories / 2);
    data = generate_bicycle_dataset(env.bike, c.num_trajectories, num_random, rng);
  } else {
    const EnvBundle env = make_env(c);
    ExpertConfig expert;
    expert.noise_prob = c.expert_noise_prob;
    expert.num_trajectories = c.num_trajectories;
    data = generate_linear_dataset(
        env.lin, expert, rng,
        env.kind == EnvKind::kConstrained ? &env.cons : nullptr);
  }
  data.env_hash = fnv1a(c.env_name);
  data.generator_seed = c.seed;
  save_dataset(data, dataset_path(c));
}

void run_train(const ExperimentConfig& c, const std::string& which) {
  const Dataset data = load_dataset(dataset_path(c));
  const Normalizer norm = fit_normalizer(data);
  const NoiseSchedule sched = make_sched(c);

  std::vector<std::string> targets;
  if (which == "all") targets = {"planner", "dynamics"};
  else if (which == "planner" || which == "dynamics" || which == "joint")
    targets = {which};
  else throw UsageError("unknown train target: " + which);

  for (const std::string& target : targets) {
    const Role role = target == "dynamics" ? Role::kDynamics : Role::kPlanner;
    const bool inpaint = target == "joint";
    const DenoiserConfig dc = make_denoiser_config(c, data, role, inpaint);

    const std::uint64_t lane = target == "planner" ? 11 : target == "dynamics" ? 12 : 13;
    Rng init_rng = Rng(c.seed).stream(lane);
    Denoiser model(dc, init_rng);
    model.normalizer() = norm;
    Trainer trainer(model, c.train);
    Rng train_rng = Rng(c.seed).stream(lane + 10);

    const int log_every = std::max(1, c.train.total_steps / 20);
    double loss_acc = 0.0;
    int loss_n = 0;
    for (int step = 1; step <= c.train.total_steps; ++step) {
      const auto batch = slice_training_batch(data, norm, c.horizon,
                                              c.train.batch_size, train_rng, inpaint);
      loss_acc += trainer.step(batch, sched, train_rng);
      ++loss_n;
      if (step % log_every == 0) {
        std::cerr << "train[" << target << "] step " << step << "/"
                  << c.train.total_steps << " loss " << loss_acc / loss_n << "\n";
        loss_acc = 0.0;
        loss_n = 0;
      }
    }
    save_checkpoint(model, trainer.ema(), sched, config_hash(c),
                    checkpoint_path(c, target));
  }
}

void ensure_pipeline(const ExperimentConfig& c, const std::string& which) {
  if (!fs::exists(dataset_path(c))) run_gen_data(c);
  std::vector<std::string> targets;
  if (which == "all") targets = {"planner", "dynamics"};
  else targets = {which};
  for (const std::string& t : targets)
    if (!fs::exists(checkpoint_path(c, t))) run_train(c, t);
}

RolloutReport run_closed_loop(const ExperimentConfig& c) {
  const auto t_start = Clock::now();
  c.validate();
  const EnvBundle env = make_env(c);
  const EvalModels models = load_models(c, env);
  const std::vector<std::uint64_t> seeds = eval_seeds(c);

  RolloutReport report;
  report.config_text = resolved_config_text(c);
  report.config_hash = config_hash(c);
  report.mode = to_string(c.sampler.mode);
  report.episodes.reserve(static_cast<std::size_t>(c.eval_episodes));
  for (int i = 0; i < c.eval_episodes; ++i) {
    report.episodes.push_back(
        env.kind == EnvKind::kBicycle
            ? eval_bicycle_episode(c, env, models, i, seeds[static_cast<std::size_t>(i)])
            : eval_linear_episode(c, env, models, i, seeds[static_cast<std::size_t>(i)]));
  }
  compute_aggregates(report);
  report.wall_seconds =
      std::chrono::duration<double>(Clock::now() - t_start).count();
  return report;
}

void run_sample(const ExperimentConfig& c, const std::string& out_path) {
  const EnvBundle env = make_env(c);
  const EvalModels models = load_models(c, env);
  const Normalizer& norm = models.planner.ema_model.normalizer();

  Rng env_rng(c.seed);
  Conditioning cond;
  Eigen::Vector2f frame_origin = Eigen::Vector2f::Zero();
  bool local_frame = false;
  if (env.kind == EnvKind::kBicycle) {
    const BicycleTask task = sample_bicycle_task(env.bike, env_rng);
    Eigen::VectorXf goal(2);
    goal << static_cast<float>(task.goal.x()), static_cast<float>(task.goal.y());
    // Goal-position tasks plan relative to the start position.
    local_frame = true;
    frame_origin = to_f(task.start_state).head(2);
    Eigen::VectorXf x0_local = to_f(task.start_state);
    x0_local.head(2).setZero();
    cond.x0 = norm.normalize_states(x0_local).col(0);
    cond.y = norm.normalize_tag(goal - Eigen::VectorXf(frame_origin));
  } else {
    Eigen::VectorXd x0(env.state_dim);
    for (int j = 0; j < env.state_dim; ++j)
      x0(j) = (2.0 * env_rng.uniform() - 1.0) * 2.0;
    cond.x0 = norm.normalize_states(to_f(x0)).col(0);
    if (env.kind == EnvKind::kConstrained) {
      cond.y.resize(2);
      cond.y(0) = static_cast<float>(c.return_scale);
      cond.y(1) = static_cast<float>(c.cost_scale * norm.normalize_cost(c.budget));
    } else {
      cond.y = norm.normalize_tag(Eigen::VectorXf::Zero(env.state_dim));
    }
  }

  Rng sampler_rng(c.seed ^ 0x73a9d1c25ef0b841ull);
  SampleStats stats;
  const DenoiserHandle* dyn =
      models.dynamics_handle ? &*models.dynamics_handle : nullptr;
  auto plans = sample_plans(models.planner_handle, dyn, models.schedule,
                            c.sampler, cond, c.num_candidates, sampler_rng,
                            &stats);
  if (local_frame)
    for (Plan& p : plans) p.states.topRows(2).colwise() += frame_origin;

  std::ofstream os(out_path);
  if (!os) throw IoError("cannot open for writing: " + out_path);
  os << "# mpdiffuser plans v1\n";
  os << "candidates = " << plans.size() << "\n";
  os << "horizon = " << c.horizon << "\n";
  os << "denoiser_evals = " << stats.total() << "\n";
  for (std::size_t i = 0; i < plans.size(); ++i) {
    os << "plan " << i << "\n";
    for (int t = 0; t < c.horizon; ++t) {
      os << t;
      for (int r = 0; r < plans[i].states.rows(); ++r)
        os << " " << fmtd(plans[i].states(r, t));
      for (int r = 0; r < plans[i].actions.rows(); ++r)
        os << " " << fmtd(plans[i].actions(r, t));
      os << "\n";
    }
  }
  if (!os) throw IoError("write failed: " + out_path);
}

AblationReport run_ablation(const ExperimentConfig& base, const std::string& id) {
  AblationReport out;
  out.id = id;
  std::ostringstream summary;

  auto eval_arm = [&](const std::string& name, const ExperimentConfig& cfg,
                      const std::string& needs) {
    ensure_pipeline(cfg, needs);
    out.arms.push_back({name, run_closed_loop(cfg)});
    return &out.arms.back().report;
  };

  if (id == "step_count") {
    ExperimentConfig alt = base;
    alt.sampler.mode = SampleMode::kAlternating;
    const RolloutReport* r_alt = eval_arm("alternating_K", alt, "all");

    ExperimentConfig pl = base;
    pl.sampler.mode = SampleMode::kPlannerOnly;
    const RolloutReport* r_pl = eval_arm("planner_K", pl, "planner");

    ExperimentConfig p2 = base;  // planner with a doubled schedule, retrained
    p2.sampler.mode = SampleMode::kPlannerOnly;
    p2.num_steps = 2 * base.num_steps;
    p2.out_dir = base.out_dir + "/abl_step2k";
    const RolloutReport* r_p2 = eval_arm("planner_2K", p2, "planner");

    summary << "alternating_K.evals = " << fmtd(r_alt->mean_evals) << "\n"
            << "planner_2K.evals = " << fmtd(r_p2->mean_evals) << "\n"
            << "alternating_K.normalized_cost = " << fmtd(r_alt->normalized_cost) << "\n"
            << "planner_K.normalized_cost = " << fmtd(r_pl->normalized_cost) << "\n"
            << "planner_2K.normalized_cost = " << fmtd(r_p2->normalized_cost) << "\n";
  } else if (id == "dynamics_noise") {
    ensure_pipeline(base, "all");
    const std::vector<double> stds = {0.0, 0.001, 0.002, 0.005, 0.01, 0.02};
    std::vector<double> costs;
    for (double s : stds) {
      ExperimentConfig cfg = base;
      cfg.dynamics_noise_std = s;
      out.arms.push_back({"noise_" + fmtd(s), run_closed_loop(cfg)});
      costs.push_back(out.arms.back().report.normalized_cost);
      summary << "cost_at_" << fmtd(s) << " = "
              << fmtd(out.arms.back().report.normalized_cost) << "\n";
    }
    summary << "spearman = " << fmtd(spearman(stds, costs)) << "\n";
  } else if (id == "sample_count") {
    ensure_pipeline(base, "all");
    for (int n : {1, 4, 8, 16, 32, 64}) {
      ExperimentConfig cfg = base;
      cfg.num_candidates = n;
      out.arms.push_back({"n_" + std::to_string(n), run_closed_loop(cfg)});
      const auto& r = out.arms.back().report;
      summary << "n_" << n << ".success_rate = " << fmtd(r.success_rate) << "\n"
              << "n_" << n << ".normalized_cost = " << fmtd(r.normalized_cost)
              << "\n";
    }
  } else if (id == "inpainting") {
    ExperimentConfig cond_cfg = base;
    cond_cfg.sampler.mode = SampleMode::kPlannerOnly;
    const RolloutReport* r_c = eval_arm("conditioning", cond_cfg, "planner");

    ExperimentConfig inp = base;
    inp.sampler.mode = SampleMode::kJointBaseline;
    const RolloutReport* r_i = eval_arm("inpainting", inp, "joint");

    summary << "conditioning.normalized_cost = " << fmtd(r_c->normalized_cost) << "\n"
            << "inpainting.normalized_cost = " << fmtd(r_i->normalized_cost) << "\n"
            << "conditioning.success_rate = " << fmtd(r_c->success_rate) << "\n"
            << "inpainting.success_rate = " << fmtd(r_i->success_rate) << "\n";
  } else if (id == "dyn_cond") {
    ExperimentConfig cc = base;
    cc.sampler.mode = SampleMode::kAlternating;
    cc.dynamics_conditional = true;
    const RolloutReport* r_c = eval_arm("conditional", cc, "all");

    ExperimentConfig uc = base;
    uc.sampler.mode = SampleMode::kAlternating;
    uc.dynamics_conditional = false;
    uc.out_dir = base.out_dir + "/abl_dyn_uncond";
    const RolloutReport* r_u = eval_arm("unconditional", uc, "all");

    summary << "conditional.normalized_cost = " << fmtd(r_c->normalized_cost) << "\n"
            << "unconditional.normalized_cost = " << fmtd(r_u->normalized_cost)
            << "\n";
  } else if (id == "params") {
    ensure_pipeline(base, "all");
    for (double omega : {1.2, 1.5, 2.0}) {
      for (double temp : {0.25, 0.5, 1.0}) {
        ExperimentConfig cfg = base;
        cfg.sampler.omega = omega;
        cfg.sampler.alpha_temp = temp;
        const std::string name = "omega_" + fmtd(omega) + "_temp_" + fmtd(temp);
        out.arms.push_back({name, run_closed_loop(cfg)});
        summary << name << ".normalized_cost = "
                << fmtd(out.arms.back().report.normalized_cost) << "\n";
      }
    }
  } else if (id == "combined") {
    ensure_pipeline(base, "all");
    ExperimentConfig alt = base;
    alt.sampler.mode = SampleMode::kAlternating;
    out.arms.push_back({"alternating", run_closed_loop(alt)});
    const double alt_cost = out.arms.back().report.normalized_cost;

    double best_cost = std::numeric_limits<double>::infinity();
    for (double lp : {0.25, 0.5, 0.75}) {
      ExperimentConfig cfg = base;
      cfg.sampler.mode = SampleMode::kCombinedScore;
      cfg.sampler.lambda = lp / (1.0 - lp);
      out.arms.push_back({"combined_lp_" + fmtd(lp), run_closed_loop(cfg)});
      const double cost = out.arms.back().report.normalized_cost;
      best_cost = std::min(best_cost, cost);
      summary << "combined_lp_" << fmtd(lp) << ".normalized_cost = " << fmtd(cost)
              << "\n";
    }
    summary << "alternating.normalized_cost = " << fmtd(alt_cost) << "\n"
            << "best_combined.normalized_cost = " << fmtd(best_cost) << "\n";
  } else if (id == "warm_start") {
    ensure_pipeline(base, "all");
    const int K = base.num_steps;
    for (int j : {std::max(1, K / 5), std::max(1, K / 2), K}) {
      ExperimentConfig cfg = base;
      cfg.sampler.warm_start_steps = j;
      if (cfg.chunk == 0) cfg.chunk = std::max(1, cfg.horizon / 4);
      out.arms.push_back({"j_" + std::to_string(j), run_closed_loop(cfg)});
      const auto& r = out.arms.back().report;
      summary << "j_" << j << ".normalized_cost = " << fmtd(r.normalized_cost) << "\n"
              << "j_" << j << ".mean_evals = " << fmtd(r.mean_evals) << "\n";
    }
  } else {
    throw UsageError("unknown ablation id: " + id);
  }

  out.summary = summary.str();
  return out;
}

void emit_report(const RolloutReport& r, const std::string& path) {
  fs::create_directories(fs::path(path).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(path).parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);

  os << "# mpdiffuser report v1\n";
  os << "config_hash = " << r.config_hash << "\n";
  os << "mode = " << r.mode << "\n";
  os << "episodes = " << r.episodes.size() << "\n";
  os << "begin-config\n" << r.config_text << "end-config\n";
  os << "aggregate.mean_return = " << fmtd(r.mean_return) << "\n";
  os << "aggregate.std_return = " << fmtd(r.std_return) << "\n";
  os << "aggregate.mean_cost = " << join_vec(r.mean_cost) << "\n";
  os << "aggregate.success_rate = " << fmtd(r.success_rate) << "\n";
  os << "aggregate.normalized_cost = " << fmtd(r.normalized_cost) << "\n";
  os << "aggregate.mean_baseline_cost = " << fmtd(r.mean_baseline_cost) << "\n";
  os << "aggregate.mean_evals = " << fmtd(r.mean_evals) << "\n";
  for (const auto& e : r.episodes) {
    os << "episode." << e.index << " = seed:" << e.seed
       << " return:" << fmtd(e.realized_return)
       << " cost:" << join_vec(e.realized_cost)
       << " baseline:" << fmtd(e.baseline_cost)
       << " success:" << (e.success ? 1 : 0) << " evals:" << e.denoiser_evals
       << "\n";
  }
  for (Eigen::Index t = 0; t < r.mean_consistency.size(); ++t)
    os << "profile." << t << " = " << fmtd(r.mean_consistency(t)) << "\n";
  // Timing lives in its own namespace so determinism checks can strip it.
  os << "time.wall_seconds = " << fmtd(r.wall_seconds) << "\n";
  for (const auto& e : r.episodes)
    os << "time.episode." << e.index << " = " << fmtd(e.wall_ms) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

void emit_profile(const RolloutReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (Eigen::Index t = 0; t < r.mean_consistency.size(); ++t)
    os << t << "\t" << fmtd(r.mean_consistency(t)) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

void emit_ablation(const AblationReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# mpdiffuser ablation v1\n";
  os << "id = " << r.id << "\n";
  os << "arms = " << r.arms.size() << "\n";
  os << r.summary;
  for (const auto& arm : r.arms) {
    os << "arm." << arm.name << ".normalized_cost = "
       << fmtd(arm.report.normalized_cost) << "\n";
    os << "arm." << arm.name << ".success_rate = " << fmtd(arm.report.success_rate)
       << "\n";
    os << "arm." << arm.name << ".mean_evals = " << fmtd(arm.report.mean_evals)
       << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

std::vector<std::uint64_t> load_seed_list(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open seed list: " + path);
  std::vector<std::uint64_t> seeds;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::uint64_t s;
    if (ls >> s) seeds.push_back(s);
  }
  return seeds;
}

std::vector<std::uint64_t> eval_seeds(const ExperimentConfig& c) {
  std::vector<std::uint64_t> seeds;
  if (!c.seeds_file.empty()) {
    seeds = load_seed_list(c.seeds_file);
    if (static_cast<int>(seeds.size()) < c.eval_episodes)
      throw ConfigError("seed list shorter than eval.episodes");
    seeds.resize(static_cast<std::size_t>(c.eval_episodes));
    return seeds;
  }
  Rng rng(c.seed ^ 0x5eed5eed5eed5eedull);
  seeds.reserve(static_cast<std::size_t>(c.eval_episodes));
  for (int i = 0; i < c.eval_episodes; ++i) seeds.push_back(rng.raw());
  return seeds;
}

}  // namespace mpd
