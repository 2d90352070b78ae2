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

#include "mpdiffuser/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mpdiffuser/errors.hpp"

namespace mpd {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("bad number for " + key + ": '" + v + "'");
  return d;
}

int parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long n = 0;
  try {
    n = std::stol(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("bad integer for " + key + ": '" + v + "'");
  return static_cast<int>(n);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad unsigned integer for " + key + ": '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError("bad unsigned integer for " + key + ": '" + v + "'");
  return n;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::string fmt(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

}  // namespace

void set_config_value(ExperimentConfig& c, const std::string& key,
                      const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "env.name") c.env_name = v;
  else if (key == "env.expert_noise_prob") c.expert_noise_prob = parse_double(key, v);
  else if (key == "env.num_trajectories") c.num_trajectories = parse_int(key, v);
  else if (key == "env.budget") c.budget = parse_double(key, v);
  else if (key == "schedule.steps") c.num_steps = parse_int(key, v);
  else if (key == "schedule.kind") c.schedule_kind = v;
  else if (key == "model.horizon") c.horizon = parse_int(key, v);
  else if (key == "model.channels") c.channels = parse_int(key, v);
  else if (key == "model.blocks") c.blocks = parse_int(key, v);
  else if (key == "model.kernel") c.kernel = parse_int(key, v);
  else if (key == "model.groups") c.groups = parse_int(key, v);
  else if (key == "model.embed_dim") c.embed_dim = parse_int(key, v);
  else if (key == "model.time_dim") c.time_dim = parse_int(key, v);
  else if (key == "model.film_x0") c.film_x0 = parse_bool(key, v);
  else if (key == "model.dynamics_conditional")
    c.dynamics_conditional = parse_bool(key, v);
  else if (key == "train.learning_rate") c.train.learning_rate = parse_double(key, v);
  else if (key == "train.batch_size") c.train.batch_size = parse_int(key, v);
  else if (key == "train.total_steps") c.train.total_steps = parse_int(key, v);
  else if (key == "train.ema_decay") c.train.ema_decay = parse_double(key, v);
  else if (key == "train.cond_dropout") c.train.cond_dropout = parse_double(key, v);
  else if (key == "train.grad_clip") c.train.grad_clip = parse_double(key, v);
  else if (key == "sampler.mode") c.sampler.mode = sample_mode_from_string(v);
  else if (key == "sampler.omega") c.sampler.omega = parse_double(key, v);
  else if (key == "sampler.alpha_temp") c.sampler.alpha_temp = parse_double(key, v);
  else if (key == "sampler.lambda") c.sampler.lambda = parse_double(key, v);
  else if (key == "sampler.warm_start_steps")
    c.sampler.warm_start_steps = parse_int(key, v);
  else if (key == "sampler.k_effective") c.sampler.k_effective = parse_int(key, v);
  else if (key == "ranker.num_candidates") c.num_candidates = parse_int(key, v);
  else if (key == "ranker.gamma") c.gamma = parse_double(key, v);
  else if (key == "ranker.return_scale") c.return_scale = parse_double(key, v);
  else if (key == "ranker.cost_scale") c.cost_scale = parse_double(key, v);
  else if (key == "eval.episodes") c.eval_episodes = parse_int(key, v);
  else if (key == "eval.chunk") c.chunk = parse_int(key, v);
  else if (key == "eval.open_loop") c.open_loop = parse_bool(key, v);
  else if (key == "eval.dynamics_noise_std")
    c.dynamics_noise_std = parse_double(key, v);
  else if (key == "eval.seeds_file") c.seeds_file = v;
  else if (key == "run.seed") c.seed = parse_u64(key, v);
  else if (key == "run.out_dir") c.out_dir = v;
  else throw ConfigError("unknown config key: " + key);
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (section.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": key outside a section");
    set_config_value(c, section + "." + key, line.substr(eq + 1));
  }
  c.validate();
  return c;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

void ExperimentConfig::validate() const {
  if (env_name != "double_integrator" && env_name != "constrained_integrator" &&
      env_name != "bicycle")
    throw ConfigError("unknown env.name: " + env_name);
  if (schedule_kind != "auto" && schedule_kind != "linear" &&
      schedule_kind != "cosine")
    throw ConfigError("unknown schedule.kind: " + schedule_kind);
  if (num_steps < 1) throw ConfigError("schedule.steps must be >= 1");
  if (horizon < 2) throw ConfigError("model.horizon must be >= 2");
  if (num_trajectories < 1) throw ConfigError("env.num_trajectories must be >= 1");
  if (expert_noise_prob < 0.0 || expert_noise_prob > 1.0)
    throw ConfigError("env.expert_noise_prob must lie in [0, 1]");
  if (num_candidates < 1) throw ConfigError("ranker.num_candidates must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw ConfigError("ranker.gamma must lie in (0, 1]");
  if (eval_episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  if (chunk < 0 || chunk > horizon)
    throw ConfigError("eval.chunk must lie in [0, horizon]");
  if (dynamics_noise_std < 0.0)
    throw ConfigError("eval.dynamics_noise_std must be >= 0");
  sampler.validate();
}

std::string resolved_config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "[env]\n"
     << "name = " << c.env_name << "\n"
     << "expert_noise_prob = " << fmt(c.expert_noise_prob) << "\n"
     << "num_trajectories = " << c.num_trajectories << "\n"
     << "budget = " << fmt(c.budget) << "\n"
     << "[schedule]\n"
     << "steps = " << c.num_steps << "\n"
     << "kind = " << c.schedule_kind << "\n"
     << "[model]\n"
     << "horizon = " << c.horizon << "\n"
     << "channels = " << c.channels << "\n"
     << "blocks = " << c.blocks << "\n"
     << "kernel = " << c.kernel << "\n"
     << "groups = " << c.groups << "\n"
     << "embed_dim = " << c.embed_dim << "\n"
     << "time_dim = " << c.time_dim << "\n"
     << "film_x0 = " << (c.film_x0 ? "true" : "false") << "\n"
     << "dynamics_conditional = " << (c.dynamics_conditional ? "true" : "false")
     << "\n"
     << "[train]\n"
     << "learning_rate = " << fmt(c.train.learning_rate) << "\n"
     << "batch_size = " << c.train.batch_size << "\n"
     << "total_steps = " << c.train.total_steps << "\n"
     << "ema_decay = " << fmt(c.train.ema_decay) << "\n"
     << "cond_dropout = " << fmt(c.train.cond_dropout) << "\n"
     << "grad_clip = " << fmt(c.train.grad_clip) << "\n"
     << "[sampler]\n"
     << "mode = " << to_string(c.sampler.mode) << "\n"
     << "omega = " << fmt(c.sampler.omega) << "\n"
     << "alpha_temp = " << fmt(c.sampler.alpha_temp) << "\n"
     << "lambda = " << fmt(c.sampler.lambda) << "\n"
     << "warm_start_steps = " << c.sampler.warm_start_steps << "\n"
     << "k_effective = " << c.sampler.k_effective << "\n"
     << "[ranker]\n"
     << "num_candidates = " << c.num_candidates << "\n"
     << "gamma = " << fmt(c.gamma) << "\n"
     << "return_scale = " << fmt(c.return_scale) << "\n"
     << "cost_scale = " << fmt(c.cost_scale) << "\n"
     << "[eval]\n"
     << "episodes = " << c.eval_episodes << "\n"
     << "chunk = " << c.chunk << "\n"
     << "open_loop = " << (c.open_loop ? "true" : "false") << "\n"
     << "dynamics_noise_std = " << fmt(c.dynamics_noise_std) << "\n"
     << "seeds_file = " << c.seeds_file << "\n"
     << "[run]\n"
     << "seed = " << c.seed << "\n"
     << "out_dir = " << c.out_dir << "\n";
  return os.str();
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  return fnv1a(resolved_config_text(config));
}

}  // namespace mpd
