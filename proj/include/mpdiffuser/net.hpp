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
//
// Temporal residual conv denoiser with hand-written reverse-mode gradients.
// Batches are laid out channel-major: a matrix of shape (channels, H * B)
// where sample b occupies columns [b*H, (b+1)*H). The network is templated on
// the scalar so the training path runs in float while the finite-difference
// gradient check can run the identical code in double.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mpdiffuser/errors.hpp"
#include "mpdiffuser/rng.hpp"

namespace mpd {

template <typename Scalar>
struct ParamStore {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  struct Entry {
    std::string name;
    Mat value;
    Mat grad;
  };
  std::vector<Entry> entries;

  Entry& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    entries.push_back({name, Mat::Zero(rows, cols), Mat::Zero(rows, cols)});
    return entries.back();
  }

  void zero_grad() {
    for (auto& e : entries) e.grad.setZero();
  }

  std::int64_t size() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
  }

  /// Flat coordinate accessors (gradient check, optimizer bookkeeping).
  Scalar get_flat(std::int64_t i) const {
    for (const auto& e : entries) {
      if (i < e.value.size()) return e.value.data()[i];
      i -= e.value.size();
    }
    throw UsageError("flat index out of range");
  }
  void set_flat(std::int64_t i, Scalar v) {
    for (auto& e : entries) {
      if (i < e.value.size()) {
        e.value.data()[i] = v;
        return;
      }
      i -= e.value.size();
    }
    throw UsageError("flat index out of range");
  }
  Scalar grad_flat(std::int64_t i) const {
    for (const auto& e : entries) {
      if (i < e.grad.size()) return e.grad.data()[i];
      i -= e.grad.size();
    }
    throw UsageError("flat index out of range");
  }

  /// All parameter values as one flat vector (checkpoint/equality checks).
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> flatten() const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(size());
    std::int64_t off = 0;
    for (const auto& e : entries) {
      std::copy(e.value.data(), e.value.data() + e.value.size(), v.data() + off);
      off += e.value.size();
    }
    return v;
  }

  double grad_sq_norm() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.grad.template cast<double>().squaredNorm();
    return s;
  }

  bool all_finite() const {
    for (const auto& e : entries)
      if (!e.value.allFinite()) return false;
    return true;
  }

  template <typename Other>
  void copy_values_from(const ParamStore<Other>& other) {
    if (other.entries.size() != entries.size())
      throw UsageError("param store shape mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i)
      entries[i].value = other.entries[i].value.template cast<Scalar>();
  }
};

/// Sinusoidal embedding of the diffusion level k.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> time_embedding(int k, int dim) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e(dim);
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double w = std::exp(-std::log(10000.0) * double(j) / double(half));
    e(2 * j) = static_cast<Scalar>(std::sin(k * w));
    e(2 * j + 1) = static_cast<Scalar>(std::cos(k * w));
  }
  return e;
}

template <typename Scalar>
class Net {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Shape {
    int in_channels = 0;
    int out_channels = 0;
    int horizon = 0;
    int channels = 32;
    int blocks = 2;
    int kernel = 5;
    int groups = 8;
    int embed_dim = 64;
    int time_dim = 16;
    int x0_dim = 0;   // 0 disables x0 conditioning (inpainting variant)
    int y_dim = 0;
    int cond_in() const { return time_dim + x0_dim + y_dim; }
  };

  struct Input {
    const Mat* x = nullptr;                          // in_channels x (H*B)
    const std::vector<int>* k = nullptr;             // per-sample level
    const Mat* x0 = nullptr;                         // x0_dim x B (may be null)
    const Mat* y = nullptr;                          // y_dim x B
    const std::vector<unsigned char>* null_flag = nullptr;
    int batch = 0;
  };

  struct GnCache {
    Mat xhat;     // C x (H*B)
    Mat inv_std;  // groups x B
  };
  struct BlockCache {
    Mat block_in;
    Mat col1, conv1;
    GnCache gn1;
    Mat film_in, film_out;  // film_in == gn1 output
    Mat scale;              // C x B  (1 + s)
    Mat swish1_in, swish1_out;
    Mat col2, conv2;
    GnCache gn2;
    Mat swish2_in;
  };
  struct Cache {
    Mat cond_in;        // cond x B
    Mat enc1_in, enc1;  // pre/post swish, E x B
    Mat enc2_in, embed;
    Mat proj_in;  // network input (alias copy)
    std::vector<BlockCache> blocks;
    Mat trunk_out;
  };

  Net(const Shape& shape, Rng* rng) : shape_(shape) {
    if (shape.channels % shape.groups != 0)
      throw ConfigError("channels must be divisible by groups");
    if (shape.kernel % 2 == 0) throw ConfigError("kernel must be odd");
    const int C = shape.channels, E = shape.embed_dim, ksz = shape.kernel;

    // References returned by add() are invalidated by the next add(), so
    // every parameter is initialized immediately after its registration.
    init(params_.add("in_proj.w", C, shape.in_channels).value, shape.in_channels,
         rng);
    params_.add("in_proj.b", C, 1);

    for (int i = 0; i < shape.blocks; ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      init(params_.add(p + "conv1.w", C, C * ksz).value, C * ksz, rng);
      params_.add(p + "conv1.b", C, 1);
      params_.add(p + "gn1.gamma", C, 1).value.setOnes();
      params_.add(p + "gn1.beta", C, 1);
      init(params_.add(p + "film.w", 2 * C, E).value, E, rng);
      params_.add(p + "film.b", 2 * C, 1);
      init(params_.add(p + "conv2.w", C, C * ksz).value, C * ksz, rng);
      params_.add(p + "conv2.b", C, 1);
      params_.add(p + "gn2.gamma", C, 1).value.setOnes();
      params_.add(p + "gn2.beta", C, 1);
    }

    // Zero-initialized head: the untrained denoiser predicts eps_hat = 0.
    params_.add("out_proj.w", shape.out_channels, C);
    params_.add("out_proj.b", shape.out_channels, 1);

    init(params_.add("enc.w1", E, shape.cond_in()).value, shape.cond_in(), rng);
    params_.add("enc.b1", E, 1);
    init(params_.add("enc.w2", E, E).value, E, rng);
    params_.add("enc.b2", E, 1);

    auto& ne = params_.add("null_embed", std::max(shape.y_dim, 1), 1);
    if (rng && shape.y_dim > 0)
      for (int i = 0; i < shape.y_dim; ++i)
        ne.value(i, 0) = static_cast<Scalar>(0.1 * rng->normal());
  }

  const Shape& shape() const { return shape_; }
  ParamStore<Scalar>& params() { return params_; }
  const ParamStore<Scalar>& params() const { return params_; }

  Mat forward(const Input& in, Cache* cache) const {
    const int B = in.batch, H = shape_.horizon, C = shape_.channels;
    if (in.x->rows() != shape_.in_channels || in.x->cols() != H * B)
      throw UsageError("net forward: bad input shape");

    Cache local;
    Cache& cc = cache ? *cache : local;

    // Conditioning encoder: [time_emb(k); x0; y-or-null] -> two swish layers.
    cc.cond_in.resize(shape_.cond_in(), B);
    const Mat& null_embed = get("null_embed").value;
    for (int b = 0; b < B; ++b) {
      cc.cond_in.col(b).head(shape_.time_dim) =
          time_embedding<Scalar>((*in.k)[b], shape_.time_dim);
      int off = shape_.time_dim;
      if (shape_.x0_dim > 0) {
        cc.cond_in.col(b).segment(off, shape_.x0_dim) = in.x0->col(b);
        off += shape_.x0_dim;
      }
      if (shape_.y_dim > 0) {
        const bool use_null = in.null_flag && (*in.null_flag)[b];
        cc.cond_in.col(b).segment(off, shape_.y_dim) =
            use_null ? null_embed.col(0).head(shape_.y_dim)
                     : Vec(in.y->col(b));
      }
    }
    cc.enc1_in = (get("enc.w1").value * cc.cond_in).colwise() +
                 Vec(get("enc.b1").value.col(0));
    cc.enc1 = swish(cc.enc1_in);
    cc.enc2_in =
        (get("enc.w2").value * cc.enc1).colwise() + Vec(get("enc.b2").value.col(0));
    cc.embed = swish(cc.enc2_in);

    // Trunk.
    Mat h = (get("in_proj.w").value * (*in.x)).colwise() +
            Vec(get("in_proj.b").value.col(0));
    cc.blocks.resize(shape_.blocks);
    for (int i = 0; i < shape_.blocks; ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      BlockCache& bc = cc.blocks[i];
      bc.block_in = h;

      im2col(h, H, B, shape_.kernel, bc.col1);
      bc.conv1 = (get(p + "conv1.w").value * bc.col1).colwise() +
                 Vec(get(p + "conv1.b").value.col(0));
      Mat g1 = group_norm_forward(bc.conv1, get(p + "gn1.gamma").value,
                                  get(p + "gn1.beta").value, B, bc.gn1);

      // FiLM: per-sample affine modulation from the conditioning embedding.
      bc.film_in = std::move(g1);
      Mat sb = (get(p + "film.w").value * cc.embed).colwise() +
               Vec(get(p + "film.b").value.col(0));
      bc.scale.resize(C, B);
      bc.film_out.resize(C, H * B);
      for (int b = 0; b < B; ++b) {
        bc.scale.col(b) = Vec::Ones(C) + sb.col(b).head(C);
        bc.film_out.middleCols(b * H, H) =
            (bc.film_in.middleCols(b * H, H).array().colwise() *
             bc.scale.col(b).array())
                .matrix()
                .colwise() +
            Vec(sb.col(b).tail(C));
      }

      bc.swish1_in = bc.film_out;
      bc.swish1_out = swish(bc.swish1_in);

      im2col(bc.swish1_out, H, B, shape_.kernel, bc.col2);
      bc.conv2 = (get(p + "conv2.w").value * bc.col2).colwise() +
                 Vec(get(p + "conv2.b").value.col(0));
      Mat g2 = group_norm_forward(bc.conv2, get(p + "gn2.gamma").value,
                                  get(p + "gn2.beta").value, B, bc.gn2);
      bc.swish2_in = std::move(g2);
      h = swish(bc.swish2_in) + bc.block_in;  // residual
    }
    cc.trunk_out = h;
    return (get("out_proj.w").value * h).colwise() +
           Vec(get("out_proj.b").value.col(0));
  }

  /// Accumulates parameter gradients for d(loss)/d(output) = d_out.
  void backward(const Input& in, const Cache& cc, const Mat& d_out) {
    const int B = in.batch, H = shape_.horizon, C = shape_.channels;

    grad("out_proj.w") += d_out * cc.trunk_out.transpose();
    grad("out_proj.b") += d_out.rowwise().sum();
    Mat dh = get("out_proj.w").value.transpose() * d_out;
    Mat d_embed = Mat::Zero(shape_.embed_dim, B);

    for (int i = shape_.blocks - 1; i >= 0; --i) {
      const std::string p = "block" + std::to_string(i) + ".";
      const BlockCache& bc = cc.blocks[i];

      Mat d_res = dh;  // residual branch passes through
      Mat d_sw2 = swish_backward(bc.swish2_in, dh);
      Mat d_conv2 = group_norm_backward(bc.conv2, bc.gn2, get(p + "gn2.gamma").value,
                                        grad(p + "gn2.gamma"), grad(p + "gn2.beta"),
                                        d_sw2, B);
      grad(p + "conv2.w") += d_conv2 * bc.col2.transpose();
      grad(p + "conv2.b") += d_conv2.rowwise().sum();
      Mat d_sw1out = col2im(get(p + "conv2.w").value.transpose() * d_conv2, H, B,
                            shape_.kernel);
      Mat d_film = swish_backward(bc.swish1_in, d_sw1out);

      // FiLM backward: into the normalized activations and the embedding.
      Mat d_sb = Mat::Zero(2 * C, B);
      Mat d_gn1out(C, H * B);
      for (int b = 0; b < B; ++b) {
        const auto df = d_film.middleCols(b * H, H);
        const auto xin = bc.film_in.middleCols(b * H, H);
        d_sb.col(b).head(C) = (df.array() * xin.array()).rowwise().sum().matrix();
        d_sb.col(b).tail(C) = df.rowwise().sum();
        d_gn1out.middleCols(b * H, H) =
            (df.array().colwise() * bc.scale.col(b).array()).matrix();
      }
      grad(p + "film.w") += d_sb * cc.embed.transpose();
      grad(p + "film.b") += d_sb.rowwise().sum();
      d_embed += get(p + "film.w").value.transpose() * d_sb;

      Mat d_conv1 = group_norm_backward(bc.conv1, bc.gn1, get(p + "gn1.gamma").value,
                                        grad(p + "gn1.gamma"), grad(p + "gn1.beta"),
                                        d_gn1out, B);
      grad(p + "conv1.w") += d_conv1 * bc.col1.transpose();
      grad(p + "conv1.b") += d_conv1.rowwise().sum();
      dh = col2im(get(p + "conv1.w").value.transpose() * d_conv1, H, B, shape_.kernel);
      dh += d_res;
    }

    grad("in_proj.w") += dh * in.x->transpose();
    grad("in_proj.b") += dh.rowwise().sum();

    // Conditioning encoder backward.
    Mat d_enc2in = swish_backward(cc.enc2_in, d_embed);
    grad("enc.w2") += d_enc2in * cc.enc1.transpose();
    grad("enc.b2") += d_enc2in.rowwise().sum();
    Mat d_enc1 = get("enc.w2").value.transpose() * d_enc2in;
    Mat d_enc1in = swish_backward(cc.enc1_in, d_enc1);
    grad("enc.w1") += d_enc1in * cc.cond_in.transpose();
    grad("enc.b1") += d_enc1in.rowwise().sum();

    if (shape_.y_dim > 0 && in.null_flag) {
      Mat d_cond = get("enc.w1").value.transpose() * d_enc1in;
      const int off = shape_.time_dim + shape_.x0_dim;
      auto& ne = grad("null_embed");
      for (int b = 0; b < B; ++b)
        if ((*in.null_flag)[b])
          ne.col(0).head(shape_.y_dim) += d_cond.col(b).segment(off, shape_.y_dim);
    }
  }

 private:
  void init(Mat& w, int fan_in, Rng* rng) {
    if (!rng) return;
    const double std = 1.0 / std::sqrt(double(fan_in));
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        w(r, c) = static_cast<Scalar>(std * rng->normal());
  }

  const typename ParamStore<Scalar>::Entry& get(const std::string& name) const {
    for (const auto& e : params_.entries)
      if (e.name == name) return e;
    throw UsageError("unknown parameter: " + name);
  }
  Mat& grad(const std::string& name) {
    for (auto& e : params_.entries)
      if (e.name == name) return e.grad;
    throw UsageError("unknown parameter: " + name);
  }

  static Mat swish(const Mat& x) {
    return (x.array() / (Scalar(1) + (-x.array()).exp())).matrix();
  }
  static Mat swish_backward(const Mat& x, const Mat& dy) {
    auto sig = (Scalar(1) / (Scalar(1) + (-x.array()).exp()));
    return (dy.array() * sig * (Scalar(1) + x.array() * (Scalar(1) - sig))).matrix();
  }

  static void im2col(const Mat& x, int H, int B, int ksz, Mat& col) {
    const int cin = static_cast<int>(x.rows());
    const int pad = ksz / 2;
    col.setZero(cin * ksz, H * B);
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < H; ++t) {
        const int c = b * H + t;
        for (int j = 0; j < ksz; ++j) {
          const int src = t + j - pad;
          if (src < 0 || src >= H) continue;  // zero padding, never crosses samples
          col.block(j * cin, c, cin, 1) = x.col(b * H + src);
        }
      }
  }

  static Mat col2im(const Mat& dcol, int H, int B, int ksz) {
    const int cin = static_cast<int>(dcol.rows()) / ksz;
    const int pad = ksz / 2;
    Mat dx = Mat::Zero(cin, H * B);
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < H; ++t) {
        const int c = b * H + t;
        for (int j = 0; j < ksz; ++j) {
          const int src = t + j - pad;
          if (src < 0 || src >= H) continue;
          dx.col(b * H + src) += dcol.block(j * cin, c, cin, 1);
        }
      }
    return dx;
  }

  Mat group_norm_forward(const Mat& x, const Mat& gamma, const Mat& beta, int B,
                         GnCache& cache) const {
    const int C = static_cast<int>(x.rows());
    const int H = static_cast<int>(x.cols()) / B;
    const int G = shape_.groups, cg = C / G;
    const Scalar eps = Scalar(1e-5);

    cache.xhat.resize(C, x.cols());
    cache.inv_std.resize(G, B);
    Mat y(C, x.cols());
    for (int b = 0; b < B; ++b) {
      for (int g = 0; g < G; ++g) {
        const auto blk = x.block(g * cg, b * H, cg, H);
        const Scalar mean = blk.mean();
        const Scalar var = (blk.array() - mean).square().mean();
        const Scalar inv = Scalar(1) / std::sqrt(var + eps);
        cache.inv_std(g, b) = inv;
        cache.xhat.block(g * cg, b * H, cg, H) = ((blk.array() - mean) * inv).matrix();
      }
      y.middleCols(b * H, H) =
          (cache.xhat.middleCols(b * H, H).array().colwise() *
           gamma.col(0).array())
              .matrix()
              .colwise() +
          Vec(beta.col(0));
    }
    return y;
  }

  Mat group_norm_backward(const Mat& x, const GnCache& cache, const Mat& gamma,
                          Mat& dgamma, Mat& dbeta, const Mat& dy, int B) const {
    const int C = static_cast<int>(x.rows());
    const int H = static_cast<int>(x.cols()) / B;
    const int G = shape_.groups, cg = C / G;

    dgamma.col(0) += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
    dbeta.col(0) += dy.rowwise().sum();

    Mat dx(C, x.cols());
    for (int b = 0; b < B; ++b) {
      for (int g = 0; g < G; ++g) {
        const auto dyb = dy.block(g * cg, b * H, cg, H);
        const auto xh = cache.xhat.block(g * cg, b * H, cg, H);
        Mat dxhat =
            (dyb.array().colwise() * gamma.col(0).segment(g * cg, cg).array())
                .matrix();
        const Scalar n = Scalar(cg * H);
        const Scalar sum_d = dxhat.sum();
        const Scalar sum_dx = (dxhat.array() * xh.array()).sum();
        dx.block(g * cg, b * H, cg, H) =
            (cache.inv_std(g, b) / n) *
            (n * dxhat.array() - sum_d - xh.array() * sum_dx).matrix();
      }
    }
    return dx;
  }

  Shape shape_;
  ParamStore<Scalar> params_;
};

extern template class Net<float>;
extern template class Net<double>;

}  // namespace mpd
