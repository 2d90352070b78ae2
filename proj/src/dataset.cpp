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

#include "mpdiffuser/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>

#include "mpdiffuser/errors.hpp"

namespace mpd {

namespace {
constexpr char kMagic[8] = {'M', 'P', 'D', 'T', 'R', 'A', 'J', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr double kScaleFloor = 1e-6;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("dataset file truncated");
  return v;
}

void write_floats(std::ostream& os, const Eigen::MatrixXf& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(float) * m.size()));
}

void read_floats(std::istream& is, Eigen::MatrixXf& m) {
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(float) * m.size()));
  if (!is) throw IoError("dataset file truncated");
}
}  // namespace

void validate(const Trajectory& traj) {
  const int T = traj.length();
  if (traj.states.cols() != T + 1 || traj.rewards.size() != T ||
      (traj.costs.rows() > 0 && traj.costs.cols() != T))
    throw UsageError("trajectory length consistency violated (|x| = |u|+1 = |r|+1)");
  if (!traj.states.allFinite() || !traj.actions.allFinite() ||
      !traj.rewards.allFinite() || !traj.costs.allFinite() || !traj.tag.allFinite())
    throw NumericalError("trajectory contains non-finite entries");
}

Eigen::MatrixXf Normalizer::normalize_states(const Eigen::MatrixXf& x) const {
  return (x.colwise() - state_shift).array().colwise() / state_scale.array();
}
Eigen::MatrixXf Normalizer::denormalize_states(const Eigen::MatrixXf& x) const {
  return (x.array().colwise() * state_scale.array()).matrix().colwise() + state_shift;
}
Eigen::MatrixXf Normalizer::normalize_actions(const Eigen::MatrixXf& u) const {
  return (u.colwise() - action_shift).array().colwise() / action_scale.array();
}
Eigen::MatrixXf Normalizer::denormalize_actions(const Eigen::MatrixXf& u) const {
  return (u.array().colwise() * action_scale.array()).matrix().colwise() + action_shift;
}
double Normalizer::normalize_return(double r) const {
  const double span = std::max(return_max - return_min, kScaleFloor);
  return (r - return_min) / span;
}
double Normalizer::normalize_cost(double c) const {
  const double span = std::max(cost_max - cost_min, kScaleFloor);
  return (c - cost_min) / span;
}
Eigen::VectorXf Normalizer::normalize_tag(const Eigen::VectorXf& tag) const {
  Eigen::VectorXf out(tag.size());
  for (int i = 0; i < tag.size(); ++i)
    out(i) = (tag(i) - state_shift(i)) / state_scale(i);
  return out;
}

Normalizer fit_normalizer(const Dataset& dataset) {
  if (dataset.episodes.empty()) throw UsageError("fit_normalizer: empty dataset");
  const int sd = dataset.state_dim, ad = dataset.action_dim;

  Eigen::VectorXd s_sum = Eigen::VectorXd::Zero(sd), s_sq = Eigen::VectorXd::Zero(sd);
  Eigen::VectorXd a_sum = Eigen::VectorXd::Zero(ad), a_sq = Eigen::VectorXd::Zero(ad);
  std::int64_t s_count = 0, a_count = 0;
  double ret_min = std::numeric_limits<double>::infinity(), ret_max = -ret_min;
  double cost_min = std::numeric_limits<double>::infinity(), cost_max = -cost_min;

  for (const auto& ep : dataset.episodes) {
    s_sum += ep.states.cast<double>().rowwise().sum();
    s_sq += ep.states.cast<double>().array().square().matrix().rowwise().sum();
    s_count += ep.states.cols();
    a_sum += ep.actions.cast<double>().rowwise().sum();
    a_sq += ep.actions.cast<double>().array().square().matrix().rowwise().sum();
    a_count += ep.actions.cols();
    ret_min = std::min(ret_min, ep.episode_return());
    ret_max = std::max(ret_max, ep.episode_return());
    cost_min = std::min(cost_min, ep.episode_cost());
    cost_max = std::max(cost_max, ep.episode_cost());
  }

  Normalizer n;
  n.state_shift = (s_sum / double(s_count)).cast<float>();
  n.action_shift = (a_sum / double(a_count)).cast<float>();
  n.state_scale.resize(sd);
  n.action_scale.resize(ad);
  for (int i = 0; i < sd; ++i) {
    const double var = s_sq(i) / double(s_count) - double(n.state_shift(i)) * n.state_shift(i);
    n.state_scale(i) = static_cast<float>(std::max(std::sqrt(std::max(var, 0.0)), kScaleFloor));
  }
  for (int i = 0; i < ad; ++i) {
    const double var = a_sq(i) / double(a_count) - double(n.action_shift(i)) * n.action_shift(i);
    n.action_scale(i) = static_cast<float>(std::max(std::sqrt(std::max(var, 0.0)), kScaleFloor));
  }
  n.return_min = ret_min;
  n.return_max = ret_max;
  n.cost_min = cost_min;
  n.cost_max = cost_max;
  return n;
}

std::vector<TrainSample> slice_training_batch(const Dataset& dataset,
                                              const Normalizer& norm, int horizon,
                                              int batch_size, Rng& rng,
                                              bool inpaint_mode) {
  std::vector<int> usable;
  usable.reserve(dataset.episodes.size());
  static bool warned = false;
  for (int i = 0; i < static_cast<int>(dataset.episodes.size()); ++i) {
    if (dataset.episodes[i].length() >= horizon) {
      usable.push_back(i);
    } else if (!warned) {
      std::cerr << "slice_training_batch: skipping episodes shorter than H=" << horizon
                << "\n";
      warned = true;
    }
  }
  if (usable.empty()) throw UsageError("no episode long enough for horizon");

  std::vector<TrainSample> batch;
  batch.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) {
    const Trajectory& ep = dataset.episodes[usable[rng.uniform_int(0, int(usable.size()) - 1)]];
    const int T = ep.length();
    const int t0 = rng.uniform_int(0, T - horizon);

    TrainSample s;
    // Goal-position tasks plan in the frame of the conditioning state: the
    // leading two (position) dimensions of states and tag are expressed
    // relative to x_{t0}, so plans are translation invariant.
    const bool local = dataset.y_kind == YKind::kGoalPosition;
    const Eigen::Vector2f origin =
        local ? Eigen::Vector2f(ep.states.col(t0).head(2)) : Eigen::Vector2f::Zero();

    // Conditioning targets come from raw values and are normalized exactly once.
    Eigen::VectorXf x0_raw = ep.states.col(t0);
    Eigen::MatrixXf st_raw = ep.states.middleCols(inpaint_mode ? t0 : t0 + 1, horizon);
    if (local) {
      x0_raw.head(2) -= origin;
      st_raw.topRows(2).colwise() -= origin;
    }
    s.cond.x0 = norm.normalize_states(x0_raw).col(0);
    s.states = norm.normalize_states(st_raw);
    s.actions = norm.normalize_actions(ep.actions.middleCols(t0, horizon));

    switch (dataset.y_kind) {
      case YKind::kFinalState:
        s.cond.y = norm.normalize_tag(ep.tag);
        break;
      case YKind::kGoalPosition:
        // Hindsight target: the slice's own terminal position (already in
        // the conditioning frame), so generated plans end where y says.
        s.cond.y = norm.normalize_tag(st_raw.col(horizon - 1).head(2));
        break;
      case YKind::kReturnCost: {
        double rtg = 0.0, ctg = 0.0;
        for (int t = t0; t < T; ++t) {
          rtg += ep.rewards(t);
          if (ep.costs.rows() > 0) ctg += ep.costs.col(t).sum();
        }
        s.cond.y.resize(2);
        s.cond.y(0) = static_cast<float>(norm.normalize_return(rtg));
        s.cond.y(1) = static_cast<float>(norm.normalize_cost(ctg));
        break;
      }
    }
    batch.push_back(std::move(s));
  }
  return batch;
}

std::uint64_t dataset_file_size(const Dataset& dataset) {
  std::uint64_t size = 8 + 4 + 8 + 8 + 8 + 5 * 4;  // magic/version/hash/seed/count/dims
  size += 8 * dataset.episodes.size();             // index table
  for (const auto& ep : dataset.episodes) {
    size += 8;  // episode length
    size += sizeof(float) * (ep.states.size() + ep.actions.size() + ep.rewards.size() +
                             ep.costs.size() + ep.tag.size());
  }
  return size;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 8);
  write_pod(os, kVersion);
  write_pod(os, dataset.env_hash);
  write_pod(os, dataset.generator_seed);
  write_pod(os, static_cast<std::uint64_t>(dataset.episodes.size()));
  write_pod(os, static_cast<std::uint32_t>(dataset.state_dim));
  write_pod(os, static_cast<std::uint32_t>(dataset.action_dim));
  write_pod(os, static_cast<std::uint32_t>(dataset.cost_dim));
  write_pod(os, static_cast<std::uint32_t>(dataset.tag_dim));
  write_pod(os, static_cast<std::uint32_t>(dataset.y_kind));

  // Index table: byte offset of each episode record.
  std::uint64_t offset = 8 + 4 + 8 + 8 + 8 + 5 * 4 + 8 * dataset.episodes.size();
  for (const auto& ep : dataset.episodes) {
    write_pod(os, offset);
    offset += 8 + sizeof(float) * (ep.states.size() + ep.actions.size() +
                                   ep.rewards.size() + ep.costs.size() + ep.tag.size());
  }
  for (const auto& ep : dataset.episodes) {
    write_pod(os, static_cast<std::uint64_t>(ep.length()));
    write_floats(os, ep.states);
    write_floats(os, ep.actions);
    Eigen::MatrixXf r = ep.rewards;
    write_floats(os, r);
    write_floats(os, ep.costs);
    Eigen::MatrixXf tag = ep.tag;
    write_floats(os, tag);
  }
  if (!os) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not an MPDTRAJ1 file: " + path);
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion)
    throw IoError("unsupported dataset version " + std::to_string(version));

  Dataset d;
  d.env_hash = read_pod<std::uint64_t>(is);
  d.generator_seed = read_pod<std::uint64_t>(is);
  const auto count = read_pod<std::uint64_t>(is);
  d.state_dim = static_cast<int>(read_pod<std::uint32_t>(is));
  d.action_dim = static_cast<int>(read_pod<std::uint32_t>(is));
  d.cost_dim = static_cast<int>(read_pod<std::uint32_t>(is));
  d.tag_dim = static_cast<int>(read_pod<std::uint32_t>(is));
  d.y_kind = static_cast<YKind>(read_pod<std::uint32_t>(is));

  for (std::uint64_t i = 0; i < count; ++i) (void)read_pod<std::uint64_t>(is);  // index

  d.episodes.resize(count);
  for (auto& ep : d.episodes) {
    const auto T = static_cast<int>(read_pod<std::uint64_t>(is));
    ep.states.resize(d.state_dim, T + 1);
    ep.actions.resize(d.action_dim, T);
    Eigen::MatrixXf r(T, 1), tag(d.tag_dim, 1);
    ep.costs.resize(d.cost_dim, d.cost_dim > 0 ? T : 0);
    read_floats(is, ep.states);
    read_floats(is, ep.actions);
    read_floats(is, r);
    if (d.cost_dim > 0) read_floats(is, ep.costs);
    read_floats(is, tag);
    ep.rewards = r.col(0);
    ep.tag = tag.col(0);
    validate(ep);
  }
  return d;
}

void export_dataset_text(const Dataset& dataset, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# episode step state... action... reward cost...\n";
  for (std::size_t i = 0; i < dataset.episodes.size(); ++i) {
    const auto& ep = dataset.episodes[i];
    for (int t = 0; t < ep.length(); ++t) {
      os << i << ' ' << t;
      for (int r = 0; r < ep.states.rows(); ++r) os << ' ' << ep.states(r, t);
      for (int r = 0; r < ep.actions.rows(); ++r) os << ' ' << ep.actions(r, t);
      os << ' ' << ep.rewards(t);
      for (int r = 0; r < ep.costs.rows(); ++r) os << ' ' << ep.costs(r, t);
      os << '\n';
    }
  }
}

Dataset corrupt_states(const Dataset& dataset, double noise_std, Rng& rng) {
  Dataset out = dataset;
  if (noise_std <= 0.0) return out;
  for (auto& ep : out.episodes)
    ep.states += static_cast<float>(noise_std) *
                 rng.normal_matrix(ep.states.rows(), ep.states.cols());
  return out;
}

}  // namespace mpd
