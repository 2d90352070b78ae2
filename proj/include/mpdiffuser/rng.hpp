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

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <random>

namespace mpd {

/// Deterministic RNG with explicit sub-stream derivation. All randomness in
/// the library flows through an Rng handed in by the caller, so results are
/// reproducible from a single master seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed), seed_(seed) {}

  /// Derive an independent stream; stream(i) is stable regardless of how much
  /// the parent has been consumed.
  Rng stream(std::uint64_t index) const {
    return Rng(splitmix(seed_ ^ (0x9e3779b97f4a7c15ull * (index + 1))));
  }

  double uniform() { return unit_(gen_); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Marsaglia polar method (explicit, libstdc++-free so
  /// the byte stream is pinned by this code alone).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  Eigen::MatrixXf normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXf m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = static_cast<float>(normal());
    return m;
  }

  Eigen::VectorXf normal_vector(Eigen::Index n) { return normal_matrix(n, 1); }

  std::uint64_t raw() { return gen_(); }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::mt19937_64 gen_;
  std::uint64_t seed_ = 0;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mpd
