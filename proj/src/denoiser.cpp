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

#include "mpdiffuser/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mpdiffuser/errors.hpp"

namespace mpd {

namespace {

template <typename Scalar>
typename Net<Scalar>::Shape net_shape(const DenoiserConfig& c) {
  typename Net<Scalar>::Shape s;
  s.in_channels = c.in_channels();
  s.out_channels = c.out_channels();
  s.horizon = c.horizon;
  s.channels = c.channels;
  s.blocks = c.blocks;
  s.kernel = c.kernel;
  s.groups = c.groups;
  s.embed_dim = c.embed_dim;
  s.time_dim = c.time_dim;
  s.x0_dim = c.film_x0 ? c.state_dim : 0;
  s.y_dim = c.y_dim;
  return s;
}

/// Noised batch with frozen randomness, shared by training and the gradient
/// check (which re-runs the identical construction in double precision).
template <typename Scalar>
struct NoisedBatch {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Mat x;       // noisy [states; actions], in_ch x (H*B)
  Mat target;  // injected noise on the role's output channels
  Mat x0, y;
  std::vector<int> k;
  std::vector<unsigned char> nulls;
  int batch = 0;
};

template <typename Scalar>
NoisedBatch<Scalar> build_noised_batch(const DenoiserConfig& cfg,
                                       const std::vector<TrainSample>& batch,
                                       const NoiseSchedule& schedule,
                                       double cond_dropout, Rng& rng) {
  using Mat = typename NoisedBatch<Scalar>::Mat;
  const int B = static_cast<int>(batch.size());
  const int H = cfg.horizon, sd = cfg.state_dim, ad = cfg.action_dim;

  NoisedBatch<Scalar> nb;
  nb.batch = B;
  nb.x.resize(sd + ad, H * B);
  nb.target.resize(cfg.out_channels(), H * B);
  nb.x0.resize(cfg.film_x0 ? sd : 0, B);
  nb.y.resize(cfg.y_dim, B);
  nb.k.resize(B);
  nb.nulls.resize(B);

  for (int b = 0; b < B; ++b) {
    const TrainSample& s = batch[b];
    if (s.states.rows() != sd || s.actions.rows() != ad || s.states.cols() != H)
      throw UsageError("training sample dims do not match denoiser config");
    const int k = rng.uniform_int(1, schedule.num_steps);
    nb.k[b] = k;
    const Scalar a = static_cast<Scalar>(std::sqrt(schedule.alpha_bar[k]));
    const Scalar c = static_cast<Scalar>(std::sqrt(1.0 - schedule.alpha_bar[k]));

    Mat eps(sd + ad, H);
    for (int col = 0; col < H; ++col)
      for (int row = 0; row < sd + ad; ++row)
        eps(row, col) = static_cast<Scalar>(rng.normal());

    Mat clean(sd + ad, H);
    clean.topRows(sd) = s.states.template cast<Scalar>();
    clean.bottomRows(ad) = s.actions.template cast<Scalar>();
    nb.x.middleCols(b * H, H) = a * clean + c * eps;
    nb.target.middleCols(b * H, H) =
        cfg.role == Role::kPlanner ? eps : Mat(eps.topRows(sd));

    if (cfg.film_x0) nb.x0.col(b) = s.cond.x0.template cast<Scalar>();
    if (cfg.y_dim > 0) nb.y.col(b) = s.cond.y.template cast<Scalar>();
    nb.nulls[b] = cfg.unconditional_y || s.cond.null_flag ||
                  rng.bernoulli(cond_dropout);
  }
  return nb;
}

template <typename Scalar>
typename Net<Scalar>::Input net_input(const NoisedBatch<Scalar>& nb) {
  typename Net<Scalar>::Input in;
  in.x = &nb.x;
  in.k = &nb.k;
  in.x0 = &nb.x0;
  in.y = &nb.y;
  in.null_flag = &nb.nulls;
  in.batch = nb.batch;
  return in;
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& config, Rng& rng)
    : config_(config), net_(net_shape<float>(config), &rng) {}

Denoiser::Denoiser(const DenoiserConfig& config)
    : config_(config), net_(net_shape<float>(config), nullptr) {}

Eigen::MatrixXf Denoiser::predict_batch(const Eigen::MatrixXf& x,
                                        const std::vector<int>& k,
                                        const Eigen::MatrixXf& x0,
                                        const Eigen::MatrixXf& y,
                                        const std::vector<unsigned char>& null_flag) const {
  const int B = static_cast<int>(k.size());
  for (int kk : k)
    if (kk < 1 || kk > config_.num_steps)
      throw UsageError("predict: level outside [1, K]");

  typename Net<float>::Input in;
  std::vector<unsigned char> nulls = null_flag;
  if (config_.unconditional_y) std::fill(nulls.begin(), nulls.end(), 1);
  Eigen::MatrixXf x0_used = config_.film_x0 ? x0 : Eigen::MatrixXf(0, B);
  in.x = &x;
  in.k = &k;
  in.x0 = &x0_used;
  in.y = &y;
  in.null_flag = &nulls;
  in.batch = B;
  return net_.forward(in, nullptr);
}

Eigen::MatrixXf Denoiser::predict(const Eigen::MatrixXf& tau_x,
                                  const Eigen::MatrixXf& tau_u, int k,
                                  const Conditioning& cond, bool use_null) const {
  const int sd = config_.state_dim, ad = config_.action_dim, H = config_.horizon;
  if (tau_x.rows() != sd || tau_u.rows() != ad || tau_x.cols() != H ||
      tau_u.cols() != H)
    throw UsageError("predict: trajectory block shape mismatch");
  Eigen::MatrixXf x(sd + ad, H);
  x.topRows(sd) = tau_x;
  x.bottomRows(ad) = tau_u;
  Eigen::MatrixXf x0 = cond.x0;
  Eigen::MatrixXf y = cond.y;
  return predict_batch(x, {k}, x0, y,
                       {static_cast<unsigned char>(use_null || cond.null_flag)});
}

Eigen::MatrixXf planner_predict(const Denoiser& model, const Eigen::MatrixXf& tau_x,
                                const Eigen::MatrixXf& tau_u, int k,
                                const Conditioning& cond, bool use_null) {
  if (model.config().role != Role::kPlanner)
    throw UsageError("planner_predict called on a non-planner model");
  return model.predict(tau_x, tau_u, k, cond, use_null);
}

Eigen::MatrixXf dynamics_predict(const Denoiser& model, const Eigen::MatrixXf& tau_x,
                                 const Eigen::MatrixXf& tau_u, int k,
                                 const Conditioning& cond, bool use_null) {
  if (model.config().role != Role::kDynamics)
    throw UsageError("dynamics_predict called on a non-dynamics model");
  return model.predict(tau_x, tau_u, k, cond, use_null);
}

Trainer::Trainer(Denoiser& model, const TrainConfig& config)
    : model_(model), config_(config) {
  if (config.cond_dropout < 0.0 || config.cond_dropout > 1.0)
    throw ConfigError("cond_dropout must lie in [0, 1]");
  if (config.learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  auto& entries = model_.net().params().entries;
  for (const auto& e : entries) {
    ema_.add(e.name, e.value.rows(), e.value.cols()).value = e.value;
    adam_m_.push_back(Eigen::MatrixXf::Zero(e.value.rows(), e.value.cols()));
    adam_v_.push_back(Eigen::MatrixXf::Zero(e.value.rows(), e.value.cols()));
  }
}

double Trainer::step(const std::vector<TrainSample>& batch,
                     const NoiseSchedule& schedule, Rng& rng) {
  auto nb = build_noised_batch<float>(model_.config(), batch, schedule,
                                      config_.cond_dropout, rng);
  auto& net = model_.net();
  net.params().zero_grad();

  typename Net<float>::Cache cache;
  Eigen::MatrixXf pred = net.forward(net_input(nb), &cache);
  const Eigen::MatrixXf diff = pred - nb.target;
  const double n = static_cast<double>(diff.size());
  const double loss = diff.cast<double>().squaredNorm() / n;
  if (!std::isfinite(loss))
    throw NumericalError("training fault: non-finite loss at step " +
                         std::to_string(step_count_) + " (batch size " +
                         std::to_string(batch.size()) + ")");

  Eigen::MatrixXf d_out = (2.0f / static_cast<float>(n)) * diff;
  net.backward(net_input(nb), cache, d_out);

  // Global-norm gradient clip.
  const double gnorm = std::sqrt(net.params().grad_sq_norm());
  const float scale =
      gnorm > config_.grad_clip ? static_cast<float>(config_.grad_clip / gnorm) : 1.0f;

  ++step_count_;
  const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
  const double lr_t = config_.learning_rate *
                      std::sqrt(1.0 - std::pow(b2, double(step_count_))) /
                      (1.0 - std::pow(b1, double(step_count_)));
  auto& entries = net.params().entries;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Eigen::MatrixXf g = scale * entries[i].grad;
    adam_m_[i] = static_cast<float>(b1) * adam_m_[i] + static_cast<float>(1 - b1) * g;
    adam_v_[i] = static_cast<float>(b2) * adam_v_[i] +
                 static_cast<float>(1 - b2) * g.cwiseProduct(g);
    entries[i].value.array() -=
        static_cast<float>(lr_t) * adam_m_[i].array() /
        (adam_v_[i].array().sqrt() + static_cast<float>(config_.adam_eps));
    ema_.entries[i].value +=
        static_cast<float>(config_.ema_decay) * (entries[i].value - ema_.entries[i].value);
  }
  return loss;
}

double gradient_check(const Denoiser& model, const std::vector<TrainSample>& batch,
                      const NoiseSchedule& schedule, std::uint64_t seed,
                      int num_coords) {
  Net<double> net(net_shape<double>(model.config()), nullptr);
  net.params().copy_values_from(model.net().params());

  Rng freeze(seed);
  auto nb = build_noised_batch<double>(model.config(), batch, schedule, 0.25, freeze);
  const auto in = net_input(nb);

  auto loss_of = [&]() {
    const Eigen::MatrixXd pred = net.forward(in, nullptr);
    return (pred - nb.target).squaredNorm() / double(nb.target.size());
  };

  net.params().zero_grad();
  typename Net<double>::Cache cache;
  Eigen::MatrixXd pred = net.forward(in, &cache);
  Eigen::MatrixXd d_out = (2.0 / double(nb.target.size())) * (pred - nb.target);
  net.backward(in, cache, d_out);

  const std::int64_t total = net.params().size();
  Rng pick(seed ^ 0xabcdef);
  double max_rel = 0.0;
  const double h = 1e-4;
  for (int c = 0; c < num_coords; ++c) {
    const std::int64_t i =
        static_cast<std::int64_t>(pick.raw() % static_cast<std::uint64_t>(total));
    const double w0 = net.params().get_flat(i);
    net.params().set_flat(i, w0 + h);
    const double lp = loss_of();
    net.params().set_flat(i, w0 - h);
    const double lm = loss_of();
    net.params().set_flat(i, w0);
    const double fd = (lp - lm) / (2.0 * h);
    const double an = net.params().grad_flat(i);
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// --- Checkpoint I/O -------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'M', 'P', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void wr(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T rd(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

void wr_string(std::ostream& os, const std::string& s) {
  wr(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string rd_string(std::istream& is) {
  const auto n = rd<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint truncated");
  return s;
}

void wr_vecf(std::ostream& os, const Eigen::VectorXf& v) {
  wr(os, static_cast<std::uint64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(sizeof(float) * v.size()));
}
Eigen::VectorXf rd_vecf(std::istream& is) {
  const auto n = rd<std::uint64_t>(is);
  Eigen::VectorXf v(static_cast<Eigen::Index>(n));
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(sizeof(float) * n));
  if (!is) throw IoError("checkpoint truncated");
  return v;
}

void write_store(std::ostream& os, const ParamStore<float>& store,
                 const std::string& prefix) {
  for (const auto& e : store.entries) {
    wr_string(os, prefix + e.name);
    wr(os, static_cast<std::uint64_t>(e.value.rows()));
    wr(os, static_cast<std::uint64_t>(e.value.cols()));
    os.write(reinterpret_cast<const char*>(e.value.data()),
             static_cast<std::streamsize>(sizeof(float) * e.value.size()));
  }
}
}  // namespace

void save_checkpoint(const Denoiser& model, const ParamStore<float>& ema,
                     const NoiseSchedule& schedule, std::uint64_t config_hash,
                     const std::string& path) {
  const auto& c = model.config();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kCkptMagic, 8);
  wr(os, kCkptVersion);
  wr(os, static_cast<std::uint32_t>(c.role));
  wr(os, static_cast<std::uint32_t>(c.y_kind));
  wr(os, static_cast<std::uint32_t>(c.state_dim));
  wr(os, static_cast<std::uint32_t>(c.action_dim));
  wr(os, static_cast<std::uint32_t>(c.horizon));
  wr(os, static_cast<std::uint32_t>(c.num_steps));
  wr(os, static_cast<std::uint32_t>(c.channels));
  wr(os, static_cast<std::uint32_t>(c.blocks));
  wr(os, static_cast<std::uint32_t>(c.kernel));
  wr(os, static_cast<std::uint32_t>(c.groups));
  wr(os, static_cast<std::uint32_t>(c.embed_dim));
  wr(os, static_cast<std::uint32_t>(c.time_dim));
  wr(os, static_cast<std::uint32_t>(c.y_dim));
  wr(os, static_cast<std::uint8_t>(c.film_x0));
  wr(os, static_cast<std::uint8_t>(c.unconditional_y));
  wr(os, static_cast<std::uint32_t>(schedule.kind));
  wr(os, schedule.beta_min);
  wr(os, schedule.beta_max);
  wr(os, config_hash);

  const auto& n = model.normalizer();
  wr_vecf(os, n.state_shift);
  wr_vecf(os, n.state_scale);
  wr_vecf(os, n.action_shift);
  wr_vecf(os, n.action_scale);
  wr(os, n.return_min);
  wr(os, n.return_max);
  wr(os, n.cost_min);
  wr(os, n.cost_max);

  const auto& live = model.net().params();
  wr(os, static_cast<std::uint32_t>(live.entries.size() + ema.entries.size()));
  write_store(os, live, "");
  write_store(os, ema, "ema.");
  if (!os) throw IoError("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw IoError("not an MPDCKPT1 checkpoint: " + path);
  const auto version = rd<std::uint32_t>(is);
  if (version != kCkptVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));

  DenoiserConfig c;
  c.role = static_cast<Role>(rd<std::uint32_t>(is));
  c.y_kind = static_cast<YKind>(rd<std::uint32_t>(is));
  c.state_dim = static_cast<int>(rd<std::uint32_t>(is));
  c.action_dim = static_cast<int>(rd<std::uint32_t>(is));
  c.horizon = static_cast<int>(rd<std::uint32_t>(is));
  c.num_steps = static_cast<int>(rd<std::uint32_t>(is));
  c.channels = static_cast<int>(rd<std::uint32_t>(is));
  c.blocks = static_cast<int>(rd<std::uint32_t>(is));
  c.kernel = static_cast<int>(rd<std::uint32_t>(is));
  c.groups = static_cast<int>(rd<std::uint32_t>(is));
  c.embed_dim = static_cast<int>(rd<std::uint32_t>(is));
  c.time_dim = static_cast<int>(rd<std::uint32_t>(is));
  c.y_dim = static_cast<int>(rd<std::uint32_t>(is));
  c.film_x0 = rd<std::uint8_t>(is) != 0;
  c.unconditional_y = rd<std::uint8_t>(is) != 0;

  const auto sched_kind = static_cast<ScheduleKind>(rd<std::uint32_t>(is));
  const double beta_min = rd<double>(is);
  const double beta_max = rd<double>(is);
  const std::uint64_t config_hash = rd<std::uint64_t>(is);

  Normalizer norm;
  norm.state_shift = rd_vecf(is);
  norm.state_scale = rd_vecf(is);
  norm.action_shift = rd_vecf(is);
  norm.action_scale = rd_vecf(is);
  norm.return_min = rd<double>(is);
  norm.return_max = rd<double>(is);
  norm.cost_min = rd<double>(is);
  norm.cost_max = rd<double>(is);

  LoadedCheckpoint out{Denoiser(c), Denoiser(c),
                       build_schedule(sched_kind, c.num_steps, beta_min, beta_max),
                       config_hash};
  out.model.normalizer() = norm;
  out.ema_model.normalizer() = norm;

  const auto count = rd<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = rd_string(is);
    const auto rows = rd<std::uint64_t>(is);
    const auto cols = rd<std::uint64_t>(is);
    const bool is_ema = name.rfind("ema.", 0) == 0;
    if (is_ema) name = name.substr(4);

    auto& store = is_ema ? out.ema_model.net().params() : out.model.net().params();
    bool found = false;
    for (auto& e : store.entries) {
      if (e.name != name) continue;
      if (static_cast<std::uint64_t>(e.value.rows()) != rows ||
          static_cast<std::uint64_t>(e.value.cols()) != cols)
        throw IoError("checkpoint array shape mismatch for " + name);
      is.read(reinterpret_cast<char*>(e.value.data()),
              static_cast<std::streamsize>(sizeof(float) * e.value.size()));
      if (!is) throw IoError("checkpoint truncated");
      found = true;
      break;
    }
    if (!found) throw IoError("unexpected checkpoint array: " + name);
  }
  return out;
}

void check_checkpoint_dims(const Denoiser& model, int state_dim, int action_dim,
                           int horizon) {
  const auto& c = model.config();
  auto complain = [](const std::string& what, int expected, int found) {
    throw ConfigError("checkpoint mismatch: " + what + " expected " +
                      std::to_string(expected) + ", found " + std::to_string(found));
  };
  if (c.state_dim != state_dim) complain("state_dim", state_dim, c.state_dim);
  if (c.action_dim != action_dim) complain("action_dim", action_dim, c.action_dim);
  if (c.horizon != horizon) complain("horizon", horizon, c.horizon);
}

}  // namespace mpd
