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

#include <cstdint>
#include <string>

#include "mpdiffuser/denoiser.hpp"
#include "mpdiffuser/sampler.hpp"

namespace mpd {

/// Full experiment description. Parsed from a sectioned key = value file;
/// every run echoes the resolved form next to its outputs.
struct ExperimentConfig {
  // [env]
  std::string env_name = "double_integrator";
  double expert_noise_prob = 0.1;
  int num_trajectories = 1000;
  double budget = 10.0;  // per cost dimension (constrained env only)

  // [schedule]
  int num_steps = 50;  // K
  std::string schedule_kind = "auto";

  // [model]
  int horizon = 32;
  int channels = 32;
  int blocks = 2;
  int kernel = 5;
  int groups = 8;
  int embed_dim = 64;
  int time_dim = 16;
  bool film_x0 = true;
  bool dynamics_conditional = true;

  // [train]
  TrainConfig train;

  // [sampler]
  SamplerConfig sampler;

  // [ranker]
  int num_candidates = 1;
  double gamma = 1.0;
  double return_scale = 1.0;
  double cost_scale = 1.0;

  // [eval]
  int eval_episodes = 250;
  int chunk = 0;  // 0 = horizon (open loop over the plan)
  bool open_loop = false;
  double dynamics_noise_std = 0.0;
  std::string seeds_file;

  // [run]
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";

  void validate() const;
};

/// Parses the sectioned text format. Unknown keys and malformed values are
/// configuration errors; missing keys keep their defaults.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

/// Applies one "section.key=value" override (CLI flags route through this).
void set_config_value(ExperimentConfig& config, const std::string& dotted_key,
                      const std::string& value);

/// Canonical echo of every field, in fixed order; reparsing it reproduces the
/// config exactly.
std::string resolved_config_text(const ExperimentConfig& config);

/// FNV-1a over the resolved text.
std::uint64_t config_hash(const ExperimentConfig& config);
std::uint64_t fnv1a(const std::string& text);

}  // namespace mpd
