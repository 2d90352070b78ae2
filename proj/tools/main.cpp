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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mpdiffuser/config.hpp"
#include "mpdiffuser/errors.hpp"
#include "mpdiffuser/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kNumerical = 2;
constexpr int kAcceptance = 3;

struct CommonOpts {
  std::string config_path;
  std::string out;
  std::string mode;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
  auto* c = cmd->add_option("--config", o.config_path, "experiment config file");
  if (config_required) c->required();
  cmd->add_option("--seed", o.seed, "master seed override");
  cmd->add_option("--out", o.out, "output directory or file override");
  cmd->add_option("--mode", o.mode, "sampler mode override");
  cmd->add_option("--set", o.overrides, "extra overrides, section.key=value");
}

mpd::ExperimentConfig resolve(const CommonOpts& o, bool out_is_dir) {
  mpd::ExperimentConfig cfg = mpd::load_config_file(o.config_path);
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  if (!o.mode.empty()) cfg.sampler.mode = mpd::sample_mode_from_string(o.mode);
  if (!o.out.empty() && out_is_dir) cfg.out_dir = o.out;
  for (const std::string& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw mpd::ConfigError("--set expects section.key=value, got: " + kv);
    mpd::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  // Optional output root for relative run directories.
  if (const char* root = std::getenv("MPD_OUT_ROOT");
      root && *root && !cfg.out_dir.empty() && cfg.out_dir.front() != '/')
    cfg.out_dir = std::string(root) + "/" + cfg.out_dir;
  cfg.validate();
  return cfg;
}

void write_resolved(const mpd::ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream os(cfg.out_dir + "/resolved_config.txt");
  os << mpd::resolved_config_text(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mpdiffuser: compositional diffusion planning on desk-scale tasks"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, sample_o, eval_o, ablate_o;
  std::string train_target = "all";
  std::string ablation_id;
  std::string report_in;
  double max_normalized_cost = -1.0;
  double min_success_rate = -1.0;

  auto* gen = app.add_subcommand("gen-data", "generate the environment dataset");
  add_common(gen, gen_o);

  auto* train = app.add_subcommand("train", "train denoiser checkpoints");
  add_common(train, train_o);
  train->add_option("--target", train_target, "planner|dynamics|joint|all");

  auto* sample = app.add_subcommand("sample", "draw candidate plans");
  add_common(sample, sample_o);

  auto* eval = app.add_subcommand("eval", "closed-loop evaluation");
  add_common(eval, eval_o);
  eval->add_option("--max-normalized-cost", max_normalized_cost,
                   "fail (exit 3) when the normalized cost exceeds this");
  eval->add_option("--min-success-rate", min_success_rate,
                   "fail (exit 3) when the success rate is below this");

  auto* ablate = app.add_subcommand("ablate", "run a named ablation");
  add_common(ablate, ablate_o);
  ablate->add_option("--id", ablation_id, "ablation id")->required();

  auto* report = app.add_subcommand("report", "print aggregates of a report file");
  report->add_option("--in", report_in, "report file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(gen_o, true);
      write_resolved(cfg);
      mpd::run_gen_data(cfg);
    } else if (train->parsed()) {
      const auto cfg = resolve(train_o, true);
      write_resolved(cfg);
      mpd::run_train(cfg, train_target);
    } else if (sample->parsed()) {
      const auto cfg = resolve(sample_o, false);
      write_resolved(cfg);
      const std::string path =
          sample_o.out.empty() ? cfg.out_dir + "/plans.txt" : sample_o.out;
      mpd::run_sample(cfg, path);
      std::cout << "wrote " << path << "\n";
    } else if (eval->parsed()) {
      const auto cfg = resolve(eval_o, false);
      write_resolved(cfg);
      const mpd::RolloutReport rep = mpd::run_closed_loop(cfg);
      const std::string base = eval_o.out.empty()
                                   ? cfg.out_dir + "/report_" + rep.mode
                                   : eval_o.out;
      mpd::emit_report(rep, base + ".txt");
      mpd::emit_profile(rep, base + "_profile.tsv");
      std::cout << "mode = " << rep.mode << "\n"
                << "normalized_cost = " << rep.normalized_cost << "\n"
                << "success_rate = " << rep.success_rate << "\n"
                << "mean_return = " << rep.mean_return << "\n"
                << "mean_evals = " << rep.mean_evals << "\n";
      if (max_normalized_cost >= 0.0 && rep.normalized_cost > max_normalized_cost) {
        std::cerr << "acceptance: normalized cost " << rep.normalized_cost
                  << " exceeds " << max_normalized_cost << "\n";
        return kAcceptance;
      }
      if (min_success_rate >= 0.0 && rep.success_rate < min_success_rate) {
        std::cerr << "acceptance: success rate " << rep.success_rate
                  << " below " << min_success_rate << "\n";
        return kAcceptance;
      }
    } else if (ablate->parsed()) {
      const auto cfg = resolve(ablate_o, true);
      write_resolved(cfg);
      const mpd::AblationReport rep = mpd::run_ablation(cfg, ablation_id);
      const std::string path = ablate_o.out.empty()
                                   ? cfg.out_dir + "/ablation_" + ablation_id + ".txt"
                                   : ablate_o.out;
      mpd::emit_ablation(rep, path);
      std::cout << rep.summary;
    } else if (report->parsed()) {
      std::ifstream is(report_in);
      if (!is) throw mpd::IoError("cannot open: " + report_in);
      std::string line;
      while (std::getline(is, line))
        if (line.rfind("aggregate.", 0) == 0 || line.rfind("mode", 0) == 0 ||
            line.rfind("episodes", 0) == 0 || line.rfind("config_hash", 0) == 0)
          std::cout << line << "\n";
    }
  } catch (const mpd::NumericalError& e) {
    std::cerr << "numerical fault: " << e.what() << "\n";
    return kNumerical;
  } catch (const mpd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const mpd::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const mpd::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
  return kOk;
}
