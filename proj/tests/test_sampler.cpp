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

#include <cmath>

#include "doctest.h"
#include "mpdiffuser/denoiser.hpp"
#include "mpdiffuser/errors.hpp"
#include "mpdiffuser/sampler.hpp"

using namespace mpd;

namespace {

constexpr int kSd = 2, kAd = 1, kH = 6;

Normalizer identity_norm() {
  Normalizer n;
  n.state_shift = Eigen::VectorXf::Zero(kSd);
  n.state_scale = Eigen::VectorXf::Ones(kSd);
  n.action_shift = Eigen::VectorXf::Zero(kAd);
  n.action_scale = Eigen::VectorXf::Ones(kAd);
  return n;
}

DenoiserHandle stub_handle(Role role, int num_steps, PredictFn fn,
                           bool inpaint = false) {
  DenoiserHandle h;
  h.role = role;
  h.state_dim = kSd;
  h.action_dim = kAd;
  h.horizon = kH;
  h.num_steps = num_steps;
  h.inpaint = inpaint;
  h.norm = identity_norm();
  h.predict = std::move(fn);
  return h;
}

/// A denoiser that knows the clean target and returns the exact noise that
/// explains the input at level k. For dynamics, only the state rows.
PredictFn exact_noise_stub(const Eigen::MatrixXf& target, const NoiseSchedule& sch,
                           bool dynamics) {
  return [target, sch, dynamics](const Eigen::MatrixXf& x, const std::vector<int>& k,
                                 const Eigen::MatrixXf&, const Eigen::MatrixXf&,
                                 const std::vector<unsigned char>&) {
    const int B = static_cast<int>(x.cols()) / kH;
    const double ab = sch.alpha_bar[static_cast<std::size_t>(k[0])];
    const float a = static_cast<float>(std::sqrt(ab));
    const float s = static_cast<float>(std::sqrt(1.0 - ab));
    const Eigen::MatrixXf eps = (x - a * target.replicate(1, B)) / s;
    return dynamics ? Eigen::MatrixXf(eps.topRows(kSd)) : eps;
  };
}

PredictFn zero_stub(int out_rows) {
  return [out_rows](const Eigen::MatrixXf& x, const std::vector<int>&,
                    const Eigen::MatrixXf&, const Eigen::MatrixXf&,
                    const std::vector<unsigned char>&) {
    return Eigen::MatrixXf::Zero(out_rows, x.cols()).eval();
  };
}

Conditioning zero_cond() {
  Conditioning c;
  c.x0 = Eigen::VectorXf::Zero(kSd);
  c.y = Eigen::VectorXf::Zero(2);
  return c;
}

DenoiserConfig real_config(Role role, int num_steps) {
  DenoiserConfig c;
  c.role = role;
  c.state_dim = kSd;
  c.action_dim = kAd;
  c.horizon = kH;
  c.num_steps = num_steps;
  c.channels = 16;
  c.blocks = 1;
  c.kernel = 5;
  c.groups = 4;
  c.embed_dim = 16;
  c.time_dim = 8;
  c.y_dim = 2;
  return c;
}

Denoiser real_model(Role role, int num_steps, std::uint64_t seed) {
  Rng rng(seed);
  Denoiser m(real_config(role, num_steps), rng);
  m.normalizer() = identity_norm();
  for (auto& e : m.net().params().entries)
    if (e.name == "out_proj.w") e.value = 0.05f * rng.normal_matrix(
        static_cast<int>(e.value.rows()), static_cast<int>(e.value.cols()));
  return m;
}

}  // namespace

TEST_CASE("a single-step chain with the exact denoiser recovers the target") {
  const auto sch = build_schedule(ScheduleKind::kLinear, 1, 0.1, 0.1);
  Rng data(1);
  const Eigen::MatrixXf target = data.normal_matrix(kSd + kAd, kH);
  const auto planner =
      stub_handle(Role::kPlanner, 1, exact_noise_stub(target, sch, false));

  SamplerConfig cfg;
  cfg.mode = SampleMode::kPlannerOnly;
  Rng rng(2);
  const auto plans = sample_plans(planner, nullptr, sch, cfg, zero_cond(), 3, rng);
  REQUIRE(plans.size() == 3);
  for (const auto& p : plans) {
    CHECK((p.norm_states - target.topRows(kSd)).norm() < 1e-5);
    CHECK((p.norm_actions - target.bottomRows(kAd)).norm() < 1e-5);
    // Identity normalizer: both coordinate systems agree.
    CHECK(p.states == p.norm_states);
  }
}

TEST_CASE("sampling is deterministic under a shared seed") {
  const int K = 4;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const Denoiser pl = real_model(Role::kPlanner, K, 10);
  const Denoiser dyn = real_model(Role::kDynamics, K, 11);
  const auto hp = make_handle(pl);
  const auto hd = make_handle(dyn);

  SamplerConfig cfg;
  cfg.mode = SampleMode::kAlternating;
  Rng a(99), b(99);
  const auto pa = sample_plans(hp, &hd, sch, cfg, zero_cond(), 4, a);
  const auto pb = sample_plans(hp, &hd, sch, cfg, zero_cond(), 4, b);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].norm_states == pb[i].norm_states);
    CHECK(pa[i].norm_actions == pb[i].norm_actions);
  }
}

TEST_CASE("combined score at lambda' = 0 matches planner-only bit for bit") {
  const int K = 5;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const Denoiser pl = real_model(Role::kPlanner, K, 20);
  const Denoiser dyn = real_model(Role::kDynamics, K, 21);
  const auto hp = make_handle(pl);
  const auto hd = make_handle(dyn);

  SamplerConfig combined;
  combined.mode = SampleMode::kCombinedScore;
  combined.lambda = 0.0;
  SamplerConfig planner_only;
  planner_only.mode = SampleMode::kPlannerOnly;

  Rng a(7), b(7);
  SampleStats sa, sb;
  const auto pa = sample_plans(hp, &hd, sch, combined, zero_cond(), 2, a, &sa);
  const auto pb = sample_plans(hp, nullptr, sch, planner_only, zero_cond(), 2, b, &sb);
  CHECK(sa.dynamics_evals == 0);
  CHECK(sa.planner_evals == sb.planner_evals);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].norm_states == pb[i].norm_states);
    CHECK(pa[i].norm_actions == pb[i].norm_actions);
  }
}

TEST_CASE("combined score blends the state noise estimates by lambda'") {
  const auto sch = build_schedule(ScheduleKind::kLinear, 1, 0.1, 0.1);
  Rng data(3);
  const Eigen::MatrixXf t_pl = data.normal_matrix(kSd + kAd, kH);
  Eigen::MatrixXf t_dyn = data.normal_matrix(kSd + kAd, kH);
  t_dyn.bottomRows(kAd) = t_pl.bottomRows(kAd);  // dynamics ignores actions

  const auto planner =
      stub_handle(Role::kPlanner, 1, exact_noise_stub(t_pl, sch, false));
  const auto dynamics =
      stub_handle(Role::kDynamics, 1, exact_noise_stub(t_dyn, sch, true));

  for (double lambda : {1.0, 3.0}) {
    SamplerConfig cfg;
    cfg.mode = SampleMode::kCombinedScore;
    cfg.lambda = lambda;
    const float lp = static_cast<float>(cfg.lambda_prime());
    Rng rng(4);
    const auto plans =
        sample_plans(planner, &dynamics, sch, cfg, zero_cond(), 1, rng);
    const Eigen::MatrixXf want =
        (1.0f - lp) * t_pl.topRows(kSd) + lp * t_dyn.topRows(kSd);
    CHECK((plans[0].norm_states - want).norm() < 1e-4);
    CHECK((plans[0].norm_actions - t_pl.bottomRows(kAd)).norm() < 1e-5);
  }
}

TEST_CASE("evaluation counts: K for planner-only, 2K for alternating") {
  const int K = 8;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner = stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd));
  const auto dynamics = stub_handle(Role::kDynamics, K, zero_stub(kSd));

  SamplerConfig po;
  po.mode = SampleMode::kPlannerOnly;
  Rng r1(5);
  SampleStats s1;
  sample_plans(planner, nullptr, sch, po, zero_cond(), 4, r1, &s1);
  CHECK(s1.planner_evals == K);
  CHECK(s1.dynamics_evals == 0);

  SamplerConfig alt;
  alt.mode = SampleMode::kAlternating;
  Rng r2(5);
  SampleStats s2;
  sample_plans(planner, &dynamics, sch, alt, zero_cond(), 4, r2, &s2);
  CHECK(s2.planner_evals == K);
  CHECK(s2.dynamics_evals == K);
  CHECK(s2.total() == 2 * K);
}

TEST_CASE("a truncated chain starts at k_effective") {
  const int K = 8;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner = stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd));
  SamplerConfig cfg;
  cfg.mode = SampleMode::kPlannerOnly;
  cfg.k_effective = 3;
  Rng rng(6);
  SampleStats st;
  sample_plans(planner, nullptr, sch, cfg, zero_cond(), 2, rng, &st);
  CHECK(st.planner_evals == 3);
  cfg.k_effective = K + 1;
  CHECK_THROWS_AS(sample_plans(planner, nullptr, sch, cfg, zero_cond(), 2, rng),
                  ConfigError);
}

TEST_CASE("plan shifting drops executed steps and repeats the tail") {
  Plan p;
  p.norm_states = Eigen::MatrixXf::Random(kSd, kH);
  p.norm_actions = Eigen::MatrixXf::Random(kAd, kH);
  p.states = p.norm_states;
  p.actions = p.norm_actions;
  const Plan s = shift_plan(p, 2);
  CHECK(s.norm_states.cols() == kH);
  CHECK(s.norm_states.leftCols(kH - 2) == p.norm_states.rightCols(kH - 2));
  CHECK(s.norm_states.col(kH - 2) == p.norm_states.col(kH - 1));
  CHECK(s.norm_states.col(kH - 1) == p.norm_states.col(kH - 1));
  CHECK(s.actions.col(kH - 1) == p.actions.col(kH - 1));
}

TEST_CASE("warm start at j = 0 returns the shifted plan unchanged") {
  const int K = 6;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner = stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd));
  Plan prev;
  prev.norm_states = Eigen::MatrixXf::Random(kSd, kH);
  prev.norm_actions = Eigen::MatrixXf::Random(kAd, kH);
  prev.states = prev.norm_states;
  prev.actions = prev.norm_actions;

  SamplerConfig cfg;
  cfg.mode = SampleMode::kPlannerOnly;
  Rng rng(8);
  SampleStats st;
  const auto plans = warm_start_resample(planner, nullptr, sch, cfg, zero_cond(),
                                         prev, 1, 0, 3, rng, &st);
  REQUIRE(plans.size() == 3);
  const Plan want = shift_plan(prev, 1);
  for (const auto& p : plans) {
    CHECK(p.norm_states == want.norm_states);
    CHECK(p.norm_actions == want.norm_actions);
  }
  CHECK(st.total() == 0);
}

TEST_CASE("warm start at j = K equals fresh sampling under the same seed") {
  const int K = 5;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const Denoiser pl = real_model(Role::kPlanner, K, 30);
  const auto hp = make_handle(pl);

  Plan prev;
  prev.norm_states = Eigen::MatrixXf::Random(kSd, kH);
  prev.norm_actions = Eigen::MatrixXf::Random(kAd, kH);
  prev.states = prev.norm_states;
  prev.actions = prev.norm_actions;

  SamplerConfig cfg;
  cfg.mode = SampleMode::kPlannerOnly;
  Rng a(17), b(17);
  const auto warm = warm_start_resample(hp, nullptr, sch, cfg, zero_cond(), prev, 2,
                                        K, 2, a);
  const auto fresh = sample_plans(hp, nullptr, sch, cfg, zero_cond(), 2, b);
  for (std::size_t i = 0; i < warm.size(); ++i) {
    CHECK(warm[i].norm_states == fresh[i].norm_states);
    CHECK(warm[i].norm_actions == fresh[i].norm_actions);
  }
}

TEST_CASE("warm start at intermediate j runs exactly j reverse steps") {
  const int K = 10;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner = stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd));
  Plan prev;
  prev.norm_states = Eigen::MatrixXf::Zero(kSd, kH);
  prev.norm_actions = Eigen::MatrixXf::Zero(kAd, kH);
  prev.states = prev.norm_states;
  prev.actions = prev.norm_actions;

  SamplerConfig cfg;
  cfg.mode = SampleMode::kPlannerOnly;
  Rng rng(9);
  SampleStats st;
  const auto plans = warm_start_resample(planner, nullptr, sch, cfg, zero_cond(),
                                         prev, 1, 3, 2, rng, &st);
  CHECK(st.planner_evals == 3);
  for (const auto& p : plans) CHECK(p.norm_states.allFinite());
  Rng rng2(10);
  CHECK_THROWS_AS(warm_start_resample(planner, nullptr, sch, cfg, zero_cond(), prev,
                                      1, K + 1, 2, rng2),
                  UsageError);
}

TEST_CASE("candidate diversity grows with the noise temperature") {
  const int K = 6;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner = stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd));

  auto spread = [&](double alpha_temp) {
    SamplerConfig cfg;
    cfg.mode = SampleMode::kPlannerOnly;
    cfg.alpha_temp = alpha_temp;
    Rng rng(12);
    const auto plans = sample_plans(planner, nullptr, sch, cfg, zero_cond(), 16, rng);
    Eigen::MatrixXf mean = Eigen::MatrixXf::Zero(kSd, kH);
    for (const auto& p : plans) mean += p.norm_states / float(plans.size());
    double s = 0.0;
    for (const auto& p : plans) s += (p.norm_states - mean).squaredNorm();
    return s;
  };
  const double lo = spread(0.25), mid = spread(0.5), hi = spread(1.0);
  CHECK(lo < mid);
  CHECK(mid < hi);
}

TEST_CASE("inpainting planners keep the first state column clamped to x0") {
  const int K = 4;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner =
      stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd), /*inpaint=*/true);
  Conditioning cond = zero_cond();
  cond.x0 << 0.7f, -0.3f;

  SamplerConfig cfg;
  cfg.mode = SampleMode::kJointBaseline;
  Rng rng(13);
  const auto plans = sample_plans(planner, nullptr, sch, cfg, cond, 3, rng);
  for (const auto& p : plans)
    CHECK((p.norm_states.col(0) - cond.x0).norm() == doctest::Approx(0.0));
}

TEST_CASE("incompatible sampler setups are rejected") {
  const int K = 4;
  const auto sch = build_schedule(ScheduleKind::kLinear, K, 1e-3, 0.2);
  const auto planner = stub_handle(Role::kPlanner, K, zero_stub(kSd + kAd));
  const auto dynamics = stub_handle(Role::kDynamics, K, zero_stub(kSd));
  Rng rng(14);

  SamplerConfig alt;
  alt.mode = SampleMode::kAlternating;
  CHECK_THROWS_AS(sample_plans(planner, nullptr, sch, alt, zero_cond(), 1, rng),
                  ConfigError);

  SamplerConfig joint;
  joint.mode = SampleMode::kJointBaseline;
  CHECK_THROWS_AS(sample_plans(planner, nullptr, sch, joint, zero_cond(), 1, rng),
                  ConfigError);

  SamplerConfig bad;
  bad.alpha_temp = 0.0;
  CHECK_THROWS_AS(sample_plans(planner, nullptr, sch, bad, zero_cond(), 1, rng),
                  ConfigError);

  const auto wrong = stub_handle(Role::kDynamics, K, zero_stub(kSd));
  CHECK_THROWS_AS(sample_plans(wrong, &dynamics, sch, alt, zero_cond(), 1, rng),
                  ConfigError);
}
