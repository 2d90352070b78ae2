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

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mpdiffuser/dataset.hpp"
#include "mpdiffuser/envs.hpp"
#include "mpdiffuser/errors.hpp"

using namespace mpd;

namespace {

Dataset small_dataset(std::uint64_t seed, int episodes = 8) {
  const auto spec = LinearSystemSpec::make_double_integrator();
  ExpertConfig expert;
  expert.noise_prob = 0.1;
  expert.num_trajectories = episodes;
  Rng rng(seed);
  Dataset d = generate_linear_dataset(spec, expert, rng);
  d.env_hash = 0x1234;
  d.generator_seed = seed;
  return d;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("dataset round-trips through the binary container byte-exactly") {
  const Dataset d = small_dataset(77);
  const std::string path = temp_path("mpd_roundtrip.bin");
  save_dataset(d, path);
  const Dataset back = load_dataset(path);

  REQUIRE(back.episodes.size() == d.episodes.size());
  CHECK(back.state_dim == d.state_dim);
  CHECK(back.action_dim == d.action_dim);
  CHECK(back.cost_dim == d.cost_dim);
  CHECK(back.tag_dim == d.tag_dim);
  CHECK(back.y_kind == d.y_kind);
  CHECK(back.env_hash == d.env_hash);
  CHECK(back.generator_seed == d.generator_seed);
  for (std::size_t i = 0; i < d.episodes.size(); ++i) {
    CHECK(back.episodes[i].states == d.episodes[i].states);
    CHECK(back.episodes[i].actions == d.episodes[i].actions);
    CHECK(back.episodes[i].rewards == d.episodes[i].rewards);
    CHECK(back.episodes[i].tag == d.episodes[i].tag);
  }
  std::remove(path.c_str());
}

TEST_CASE("declared file size matches the bytes on disk") {
  const Dataset d = small_dataset(78);
  const std::string path = temp_path("mpd_size.bin");
  save_dataset(d, path);
  CHECK(std::filesystem::file_size(path) == dataset_file_size(d));
  std::remove(path.c_str());
}

TEST_CASE("loader rejects a truncated file") {
  const Dataset d = small_dataset(79, 2);
  const std::string path = temp_path("mpd_trunc.bin");
  save_dataset(d, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_AS(load_dataset(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("normalizer is invertible and standardizes the data") {
  const Dataset d = small_dataset(80, 32);
  const Normalizer norm = fit_normalizer(d);

  // Round trip.
  const Eigen::MatrixXf x = d.episodes[0].states;
  CHECK((norm.denormalize_states(norm.normalize_states(x)) - x).norm() <
        1e-4 * (1.0f + x.norm()));

  // Recompute the moments of the normalized states.
  double sum = 0.0, sum_sq = 0.0;
  long n = 0;
  for (const auto& ep : d.episodes) {
    const Eigen::MatrixXf s = norm.normalize_states(ep.states);
    sum += s.row(0).cast<double>().sum();
    sum_sq += s.row(0).cast<double>().array().square().sum();
    n += s.cols();
  }
  const double mean = sum / double(n);
  const double var = sum_sq / double(n) - mean * mean;
  CHECK(std::abs(mean) < 1e-3);
  CHECK(var == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("return normalization maps the dataset range onto [0, 1]") {
  const Dataset d = small_dataset(81, 16);
  const Normalizer norm = fit_normalizer(d);
  double lo = 1e30, hi = -1e30;
  for (const auto& ep : d.episodes) {
    const double r = norm.normalize_return(ep.episode_return());
    lo = std::min(lo, r);
    hi = std::max(hi, r);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
  CHECK(lo == doctest::Approx(0.0));
  CHECK(hi == doctest::Approx(1.0));
}

TEST_CASE("training slices are uniform over episode offsets") {
  const Dataset d = small_dataset(82, 4);
  const Normalizer norm = fit_normalizer(d);
  const int H = 16;
  const int offsets = d.episodes[0].length() - H + 1;  // 185 valid offsets

  // Identify the offset of each slice by matching its first action column.
  Rng rng(5);
  std::vector<int> counts(static_cast<std::size_t>(offsets), 0);
  const int draws = 20000;
  const auto batch = slice_training_batch(d, norm, H, draws, rng);
  for (const auto& s : batch) {
    bool found = false;
    for (const auto& ep : d.episodes) {
      const Eigen::MatrixXf na = norm.normalize_actions(ep.actions);
      for (int off = 0; off < offsets && !found; ++off) {
        if ((na.middleCols(off, H) - s.actions).norm() < 1e-6) {
          ++counts[static_cast<std::size_t>(off)];
          found = true;
        }
      }
      if (found) break;
    }
    CHECK(found);
  }
  // Chi-squared against the uniform distribution over offsets.
  const double expected = double(draws) / offsets;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // dof = 184; the 0.999 quantile is ~250. Flags gross non-uniformity only.
  CHECK(chi2 < 250.0);
}

TEST_CASE("slices shorter than the horizon are rejected when nothing fits") {
  Dataset d = small_dataset(83, 2);
  const Normalizer norm = fit_normalizer(d);
  Rng rng(6);
  CHECK_THROWS_AS(slice_training_batch(d, norm, 1000, 4, rng), UsageError);
}

TEST_CASE("return-cost conditioning carries normalized to-go values") {
  const auto lin = LinearSystemSpec::make_double_integrator();
  ConstrainedIntegratorSpec cons;
  cons.base = lin;
  ExpertConfig expert;
  expert.noise_prob = 0.2;
  expert.num_trajectories = 6;
  Rng gen(31);
  const Dataset d = generate_linear_dataset(lin, expert, gen, &cons);
  const Normalizer norm = fit_normalizer(d);

  Rng rng(7);
  const auto batch = slice_training_batch(d, norm, 8, 64, rng);
  for (const auto& s : batch) {
    REQUIRE(s.cond.y.size() == 2);
    CHECK(s.cond.y(0) >= -1e-5);
    CHECK(s.cond.y(1) >= -1e-5);
    // To-go values from a suffix can exceed the episode-level maximum only
    // via the min-max clamp convention, never below zero.
  }
}

TEST_CASE("goal-position slices are expressed in the conditioning frame") {
  BicycleSpec spec;
  Rng gen(17);
  const Dataset d = generate_bicycle_dataset(spec, 3, 2, gen);
  const Normalizer norm = fit_normalizer(d);
  Rng rng(9);
  const auto batch = slice_training_batch(d, norm, 8, 32, rng);
  const Eigen::VectorXf zero_ref =
      norm.normalize_states(Eigen::VectorXf::Zero(d.state_dim)).col(0);
  for (const auto& s : batch) {
    // The x0 position entries always encode the frame origin (zero).
    CHECK((s.cond.x0.head(2) - zero_ref.head(2)).norm() < 1e-6);
    // The first plan state sits within one step of the frame origin.
    const Eigen::MatrixXf st = norm.denormalize_states(s.states);
    CHECK(st.col(0).head(2).norm() < spec.speed_max * spec.dt + 1e-4);
  }
}

TEST_CASE("inpainting slices start at the conditioning state") {
  const Dataset d = small_dataset(84, 4);
  const Normalizer norm = fit_normalizer(d);
  Rng rng(8);
  const auto batch = slice_training_batch(d, norm, 8, 16, rng, true);
  for (const auto& s : batch)
    CHECK((s.states.col(0) - s.cond.x0).norm() < 1e-6);
}

TEST_CASE("validate flags inconsistent trajectories") {
  Trajectory t;
  t.states = Eigen::MatrixXf::Zero(2, 5);
  t.actions = Eigen::MatrixXf::Zero(1, 3);  // should be 4
  t.rewards = Eigen::VectorXf::Zero(3);
  CHECK_THROWS_AS(validate(t), UsageError);
}

TEST_CASE("state corruption perturbs states at the requested scale") {
  const Dataset d = small_dataset(85, 4);
  Rng rng(9);
  const Dataset noisy = corrupt_states(d, 0.01, rng);
  double sum_sq = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < d.episodes.size(); ++i) {
    const Eigen::MatrixXf diff = noisy.episodes[i].states - d.episodes[i].states;
    sum_sq += diff.cast<double>().array().square().sum();
    n += diff.size();
  }
  CHECK(std::sqrt(sum_sq / double(n)) == doctest::Approx(0.01).epsilon(0.1));
  // Actions are untouched.
  CHECK(noisy.episodes[0].actions == d.episodes[0].actions);
}
