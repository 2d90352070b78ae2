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

#include "mpdiffuser/ranker.hpp"

#include <cmath>
#include <limits>

#include "mpdiffuser/errors.hpp"

namespace mpd {

void BudgetSpec::validate() const {
  if (budget.size() != remaining.size())
    throw ConfigError("budget and remaining must have equal cost dimensions");
  if ((remaining.array() > budget.array()).any())
    throw ConfigError("remaining budget exceeds the episode budget");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (num_candidates < 1) throw ConfigError("num_candidates must be >= 1");
}

std::pair<double, Eigen::VectorXd> score(const Eigen::MatrixXf& states,
                                         const Eigen::MatrixXf& actions,
                                         const StepModel& reward_model,
                                         const std::vector<StepModel>& cost_models,
                                         double gamma) {
  const int H = static_cast<int>(states.cols());
  if (actions.cols() != H || H < 1)
    throw UsageError("score: state/action horizon mismatch");

  double j = 0.0;
  Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cost_models.size()));
  double disc = 1.0;
  for (int t = 0; t < H; ++t) {
    const Eigen::VectorXf x = states.col(t);
    const Eigen::VectorXf u = actions.col(t);
    j += disc * reward_model(x, u);
    for (std::size_t m = 0; m < cost_models.size(); ++m)
      c(static_cast<Eigen::Index>(m)) += disc * cost_models[m](x, u);
    disc *= gamma;
  }
  return {j, c};
}

ScoredCandidate make_scored(int index, double j_hat, Eigen::VectorXd c_hat,
                            const Eigen::VectorXd& remaining) {
  if (c_hat.size() != remaining.size())
    throw UsageError("cost estimate dimension does not match the budget");
  ScoredCandidate s;
  s.index = index;
  s.j_hat = j_hat;
  s.feasible = (c_hat.array() <= remaining.array()).all();
  s.c_hat = std::move(c_hat);
  return s;
}

int select_budget_aware(const std::vector<ScoredCandidate>& candidates) {
  if (candidates.empty()) throw UsageError("select: no candidates");

  int best = -1;
  double best_j = -std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    if (!c.feasible) continue;
    if (c.j_hat > best_j) {
      best_j = c.j_hat;
      best = c.index;
    }
  }
  if (best >= 0) return best;

  // Fallback: least total estimated cost (scalarized by unweighted sum).
  double best_c = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    const double total = c.c_hat.sum();
    if (total < best_c) {
      best_c = total;
      best = c.index;
    }
  }
  return best;
}

int rank_generic(const std::vector<double>& rho) {
  if (rho.empty()) throw UsageError("rank: no candidates");
  int best = -1;
  double best_rho = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rho.size(); ++i) {
    if (!std::isfinite(rho[i])) continue;
    if (rho[i] > best_rho) {
      best_rho = rho[i];
      best = static_cast<int>(i);
    }
  }
  if (best < 0) throw UsageError("rank: every candidate score was non-finite");
  return best;
}

void update_remaining_budget(BudgetSpec& budget, const Eigen::VectorXd& realized_cost) {
  if (realized_cost.size() != budget.remaining.size())
    throw UsageError("realized cost dimension does not match the budget");
  if ((realized_cost.array() < 0.0).any())
    throw UsageError("realized costs must be nonnegative");
  budget.remaining = (budget.remaining - realized_cost).cwiseMax(0.0);
}

// --- Learned step model -----------------------------------------------------

namespace {
inline Eigen::VectorXf swish_v(const Eigen::VectorXf& x) {
  return (x.array() / (1.0f + (-x.array()).exp())).matrix();
}
}  // namespace

MlpModel::MlpModel(int state_dim, int action_dim, int hidden, Rng& rng)
    : state_dim_(state_dim), action_dim_(action_dim), hidden_(hidden) {
  const int in = state_dim + action_dim;
  const float s1 = 1.0f / std::sqrt(static_cast<float>(in));
  const float s2 = 1.0f / std::sqrt(static_cast<float>(hidden));
  w1_ = s1 * rng.normal_matrix(hidden, in);
  w2_ = s2 * rng.normal_matrix(hidden, hidden);
  w3_ = s2 * rng.normal_vector(hidden);
  b1_ = Eigen::VectorXf::Zero(hidden);
  b2_ = Eigen::VectorXf::Zero(hidden);
}

double MlpModel::predict(const Eigen::VectorXf& x, const Eigen::VectorXf& u) const {
  if (x.size() != state_dim_ || u.size() != action_dim_)
    throw UsageError("learned model: input dimension mismatch");
  Eigen::VectorXf in(state_dim_ + action_dim_);
  if (fitted_) {
    in.head(state_dim_) = norm_.normalize_states(x);
    in.tail(action_dim_) = norm_.normalize_actions(u);
  } else {
    in.head(state_dim_) = x;
    in.tail(action_dim_) = u;
  }
  const Eigen::VectorXf h1 = swish_v(w1_ * in + b1_);
  const Eigen::VectorXf h2 = swish_v(w2_ * h1 + b2_);
  return static_cast<double>(w3_.dot(h2) + b3_);
}

StepModel MlpModel::as_step_model() const {
  return [this](const Eigen::VectorXf& x, const Eigen::VectorXf& u) {
    return predict(x, u);
  };
}

void MlpModel::fit(const Dataset& dataset, const Normalizer& norm,
                   int target_cost_dim, int steps, int batch_size,
                   double learning_rate, Rng& rng) {
  if (dataset.episodes.empty()) throw UsageError("learned model: empty dataset");
  if (target_cost_dim >= dataset.cost_dim)
    throw UsageError("learned model: cost dimension out of range");
  norm_ = norm;
  fitted_ = true;

  const int in_dim = state_dim_ + action_dim_;
  Eigen::MatrixXf m_w1 = Eigen::MatrixXf::Zero(hidden_, in_dim), v_w1 = m_w1;
  Eigen::MatrixXf m_w2 = Eigen::MatrixXf::Zero(hidden_, hidden_), v_w2 = m_w2;
  Eigen::VectorXf m_w3 = Eigen::VectorXf::Zero(hidden_), v_w3 = m_w3;
  Eigen::VectorXf m_b1 = m_w3, v_b1 = m_w3, m_b2 = m_w3, v_b2 = m_w3;
  float m_b3 = 0.0f, v_b3 = 0.0f;
  const float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;

  for (int step = 1; step <= steps; ++step) {
    Eigen::MatrixXf in(in_dim, batch_size);
    Eigen::VectorXf target(batch_size);
    for (int b = 0; b < batch_size; ++b) {
      const auto& ep = dataset.episodes[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(dataset.episodes.size()) - 1))];
      const int t = rng.uniform_int(0, ep.length() - 1);
      in.col(b).head(state_dim_) = norm_.normalize_states(ep.states.col(t));
      in.col(b).tail(action_dim_) = norm_.normalize_actions(ep.actions.col(t));
      target(b) = target_cost_dim < 0 ? ep.rewards(t) : ep.costs(target_cost_dim, t);
    }

    const Eigen::MatrixXf z1 = (w1_ * in).colwise() + b1_;
    const Eigen::ArrayXXf sig1 = 1.0f / (1.0f + (-z1.array()).exp());
    const Eigen::MatrixXf h1 = (z1.array() * sig1).matrix();
    const Eigen::MatrixXf z2 = (w2_ * h1).colwise() + b2_;
    const Eigen::ArrayXXf sig2 = 1.0f / (1.0f + (-z2.array()).exp());
    const Eigen::MatrixXf h2 = (z2.array() * sig2).matrix();
    Eigen::VectorXf pred = h2.transpose() * w3_;
    pred.array() += b3_;

    const Eigen::VectorXf d_pred =
        (2.0f / static_cast<float>(batch_size)) * (pred - target);
    const Eigen::VectorXf g_w3 = h2 * d_pred;
    const float g_b3 = d_pred.sum();
    const Eigen::MatrixXf d_h2 = w3_ * d_pred.transpose();
    const Eigen::MatrixXf d_z2 =
        (d_h2.array() * sig2 * (1.0f + z2.array() * (1.0f - sig2))).matrix();
    const Eigen::MatrixXf g_w2 = d_z2 * h1.transpose();
    const Eigen::VectorXf g_b2 = d_z2.rowwise().sum();
    const Eigen::MatrixXf d_h1 = w2_.transpose() * d_z2;
    const Eigen::MatrixXf d_z1 =
        (d_h1.array() * sig1 * (1.0f + z1.array() * (1.0f - sig1))).matrix();
    const Eigen::MatrixXf g_w1 = d_z1 * in.transpose();
    const Eigen::VectorXf g_b1 = d_z1.rowwise().sum();

    const float lr_t = static_cast<float>(
        learning_rate * std::sqrt(1.0 - std::pow(beta2, step)) /
        (1.0 - std::pow(beta1, step)));
    auto adam = [&](auto& w, auto& m, auto& v, const auto& g) {
      m = beta1 * m + (1.0f - beta1) * g;
      v = (beta2 * v.array() + (1.0f - beta2) * g.array().square()).matrix();
      w.array() -= lr_t * m.array() / (v.array().sqrt() + eps);
    };
    adam(w1_, m_w1, v_w1, g_w1);
    adam(b1_, m_b1, v_b1, g_b1);
    adam(w2_, m_w2, v_w2, g_w2);
    adam(b2_, m_b2, v_b2, g_b2);
    adam(w3_, m_w3, v_w3, g_w3);
    m_b3 = beta1 * m_b3 + (1.0f - beta1) * g_b3;
    v_b3 = beta2 * v_b3 + (1.0f - beta2) * g_b3 * g_b3;
    b3_ -= lr_t * m_b3 / (std::sqrt(v_b3) + eps);
  }
}

}  // namespace mpd
