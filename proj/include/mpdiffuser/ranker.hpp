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
#include <functional>
#include <utility>
#include <vector>

#include "mpdiffuser/dataset.hpp"
#include "mpdiffuser/rng.hpp"

namespace mpd {

/// Per-step scalar model r(x, u) or c(x, u) in environment units.
using StepModel = std::function<double(const Eigen::VectorXf& x,
                                       const Eigen::VectorXf& u)>;

/// Episode cost budget and candidate-count bookkeeping.
struct BudgetSpec {
  Eigen::VectorXd budget;     // d, one entry per cost dimension
  Eigen::VectorXd remaining;  // B_rem, starts at d
  double gamma = 1.0;
  double return_scale = 1.0;  // conditioning scale on returns
  double cost_scale = 1.0;    // conditioning scale on remaining budget
  int num_candidates = 1;

  void validate() const;
};

struct ScoredCandidate {
  int index = 0;
  double j_hat = 0.0;
  Eigen::VectorXd c_hat;  // one entry per cost dimension
  bool feasible = false;  // c_hat <= remaining elementwise
};

/// Discounted estimates over a planned horizon:
///   J = sum_t gamma^t r(x_t, u_t), C_m likewise per cost model.
std::pair<double, Eigen::VectorXd> score(const Eigen::MatrixXf& states,
                                         const Eigen::MatrixXf& actions,
                                         const StepModel& reward_model,
                                         const std::vector<StepModel>& cost_models,
                                         double gamma);

ScoredCandidate make_scored(int index, double j_hat, Eigen::VectorXd c_hat,
                            const Eigen::VectorXd& remaining);

/// Budget-aware selection: the highest-return candidate whose estimated cost
/// fits the remaining budget; if none fits, the one with the smallest summed
/// cost. Ties break toward the lowest index. Returns the candidate index.
int select_budget_aware(const std::vector<ScoredCandidate>& candidates);

/// Generic preference ranking: argmax of rho, lowest index on ties.
/// Candidates with non-finite rho are excluded; throws when all are.
int rank_generic(const std::vector<double>& rho);

/// Decrements B_rem by one step's realized cost, floored at zero.
void update_remaining_budget(BudgetSpec& budget, const Eigen::VectorXd& realized_cost);

/// Learned per-step scalar model: two swish hidden layers over the normalized
/// [state; action] pair, regressed with Adam. The analytic models are the
/// default; this is the ablation substitute.
class MlpModel {
 public:
  MlpModel(int state_dim, int action_dim, int hidden, Rng& rng);

  double predict(const Eigen::VectorXf& x, const Eigen::VectorXf& u) const;
  StepModel as_step_model() const;

  /// target_cost_dim < 0 regresses rewards, otherwise that cost row.
  void fit(const Dataset& dataset, const Normalizer& norm, int target_cost_dim,
           int steps, int batch_size, double learning_rate, Rng& rng);

 private:
  int state_dim_, action_dim_, hidden_;
  Normalizer norm_;
  bool fitted_ = false;
  Eigen::MatrixXf w1_, w2_;
  Eigen::VectorXf b1_, b2_, w3_;
  float b3_ = 0.0f;
};

}  // namespace mpd
