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

#include <optional>
#include <string>
#include <vector>

#include "mpdiffuser/config.hpp"
#include "mpdiffuser/envs.hpp"
#include "mpdiffuser/ranker.hpp"
#include "mpdiffuser/sampler.hpp"

namespace mpd {

struct EpisodeRecord {
  int index = 0;
  std::uint64_t seed = 0;
  double realized_return = 0.0;
  Eigen::VectorXd realized_cost;   // one entry per cost dimension
  double baseline_cost = 0.0;      // oracle-controller cost from the same start
  bool success = false;
  Eigen::VectorXd consistency;     // open-loop residual profile of the first plan
  std::int64_t denoiser_evals = 0;
  double wall_ms = 0.0;
};

struct RolloutReport {
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::string mode;
  std::vector<EpisodeRecord> episodes;

  // Aggregates, recomputable from the per-episode records.
  double mean_return = 0.0;
  double std_return = 0.0;
  Eigen::VectorXd mean_cost;
  double success_rate = 0.0;
  double normalized_cost = 0.0;  // realized / oracle, ratio of means
  double mean_baseline_cost = 0.0;
  Eigen::VectorXd mean_consistency;
  double mean_evals = 0.0;
  double wall_seconds = 0.0;  // timing only; excluded from determinism checks
};

void compute_aggregates(RolloutReport& report);

/// Run-directory layout helpers (everything lives under config.out_dir).
std::string dataset_path(const ExperimentConfig& config);
std::string checkpoint_path(const ExperimentConfig& config, const std::string& which);

/// Generates and saves the configured environment's dataset.
void run_gen_data(const ExperimentConfig& config);

/// Trains and checkpoints the requested models. which: "planner", "dynamics",
/// "joint" (inpainting planner), or "all" (planner + dynamics).
void run_train(const ExperimentConfig& config, const std::string& which);

/// Trains only the models missing on disk, then returns. Generates the
/// dataset first when absent. Used for checkpoint caching across runs.
void ensure_pipeline(const ExperimentConfig& config, const std::string& which);

/// Closed-loop evaluation with candidate ranking, budget accounting, and
/// warm-start replanning, against the checkpoints in config.out_dir.
RolloutReport run_closed_loop(const ExperimentConfig& config);

/// Draws num_candidates plans for a seeded initial condition and writes them
/// as columnar text.
void run_sample(const ExperimentConfig& config, const std::string& out_path);

struct AblationArm {
  std::string name;
  RolloutReport report;
};
struct AblationReport {
  std::string id;
  std::vector<AblationArm> arms;
  std::string summary;  // key = value lines derived from the arms
};

/// Known ids: step_count, dynamics_noise, sample_count, inpainting, dyn_cond,
/// params, combined, warm_start.
AblationReport run_ablation(const ExperimentConfig& config, const std::string& id);

/// Structured-text report (config echo, aggregates, per-episode rows; timing
/// in dedicated "time." fields) plus a plot-ready residual-profile file.
void emit_report(const RolloutReport& report, const std::string& path);
void emit_profile(const RolloutReport& report, const std::string& path);
void emit_ablation(const AblationReport& report, const std::string& path);

/// Fixed evaluation seed list: from config.seeds_file when set (one integer
/// per line, '#' comments), otherwise derived from the master seed.
std::vector<std::uint64_t> load_seed_list(const std::string& path);
std::vector<std::uint64_t> eval_seeds(const ExperimentConfig& config);

}  // namespace mpd
