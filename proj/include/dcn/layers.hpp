#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

using Rng = std::mt19937_64;

/// A named array owned by a layer. Buffers (batch-norm running statistics) are
/// non-trainable but still travel with checkpoints and checksums.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Shape shape, bool train = true)
      : name(std::move(n)), value(shape), grad(train ? Tensor<T>(shape) : Tensor<T>()), trainable(train) {}
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

template <typename T>
void zero_grad(const ParameterList<T>& params) {
  for (auto* p : params)
    if (p->trainable) p->grad.fill(T{0});
}

template <typename T>
std::uint64_t checksum(const ParameterList<T>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto* p : params) h = checksum<T>(p->value.values(), h);
  return h;
}

/// Rectifier-aware normal initialisation, std = sqrt(2 / fan_in).
template <typename T>
void he_normal(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : w.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

/// 2-D convolution without bias, lowered to one GEMM over the whole batch.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t pad)
      : weight_(name + ".weight", {out, in, kernel, kernel}), in_(in), out_(out), k_(kernel), stride_(stride),
        pad_(pad) {}

  void init(Rng& rng) { he_normal(weight_.value, in_ * k_ * k_, rng); }

  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t output_size(std::size_t in_size) const { return (in_size + 2 * pad_ - k_) / stride_ + 1; }
  Parameter<T>& weight() { return weight_; }

  Tensor<T> forward(const Tensor<T>& x, bool keep_for_backward = true) {
    if (x.rank() != 4 || x.dim(1) != in_)
      throw Error(weight_.name + ": expected " + std::to_string(in_) + " input channels, got shape " +
                  to_string(x.shape()));
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (h + 2 * pad_ < k_ || w + 2 * pad_ < k_) throw Error(weight_.name + ": input smaller than kernel");
    const std::size_t ho = output_size(h), wo = output_size(w);
    input_shape_ = x.shape();

    RowMatrix<T> col = im2col(x, ho, wo);
    Eigen::Map<const RowMatrix<T>> wmat(weight_.value.data(), out_, in_ * k_ * k_);
    RowMatrix<T> y = wmat * col;

    Tensor<T> out({n, out_, ho, wo});
    const std::size_t hw = ho * wo;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t co = 0; co < out_; ++co)
        std::copy_n(y.data() + co * n * hw + i * hw, hw, out.data() + (i * out_ + co) * hw);
    if (keep_for_backward) col_ = std::move(col);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t n = dy.dim(0), ho = dy.dim(2), wo = dy.dim(3), hw = ho * wo;
    RowMatrix<T> dmat(out_, n * hw);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t co = 0; co < out_; ++co)
        std::copy_n(dy.data() + (i * out_ + co) * hw, hw, dmat.data() + co * n * hw + i * hw);

    Eigen::Map<RowMatrix<T>> gmat(weight_.grad.data(), out_, in_ * k_ * k_);
    gmat.noalias() += dmat * col_.transpose();
    Eigen::Map<const RowMatrix<T>> wmat(weight_.value.data(), out_, in_ * k_ * k_);
    RowMatrix<T> dcol = wmat.transpose() * dmat;
    return col2im(dcol, ho, wo);
  }

  void collect(ParameterList<T>& out) { out.push_back(&weight_); }

 private:
  RowMatrix<T> im2col(const Tensor<T>& x, std::size_t ho, std::size_t wo) const {
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), hw = ho * wo;
    RowMatrix<T> col(in_ * k_ * k_, n * hw);
    for (std::size_t ci = 0; ci < in_; ++ci)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          T* row = col.data() + ((ci * k_ + ky) * k_ + kx) * n * hw;
          for (std::size_t i = 0; i < n; ++i) {
            const T* src = x.data() + (i * in_ + ci) * h * w;
            T* dst = row + i * hw;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
                dst[oy * wo + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                        ? src[iy * static_cast<long>(w) + ix]
                                        : T{0};
              }
            }
          }
        }
    return col;
  }

  Tensor<T> col2im(const RowMatrix<T>& dcol, std::size_t ho, std::size_t wo) const {
    const std::size_t n = input_shape_[0], h = input_shape_[2], w = input_shape_[3], hw = ho * wo;
    Tensor<T> dx(input_shape_);
    for (std::size_t ci = 0; ci < in_; ++ci)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const T* row = dcol.data() + ((ci * k_ + ky) * k_ + kx) * n * hw;
          for (std::size_t i = 0; i < n; ++i) {
            T* dst = dx.data() + (i * in_ + ci) * h * w;
            const T* src = row + i * hw;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
                if (ix >= 0 && ix < static_cast<long>(w)) dst[iy * static_cast<long>(w) + ix] += src[oy * wo + ox];
              }
            }
          }
        }
    return dx;
  }

  Parameter<T> weight_;
  std::size_t in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Shape input_shape_;
  RowMatrix<T> col_;
};

/// Per-channel batch normalisation. `train` selects batch statistics and
/// updates the running estimates; otherwise the running estimates are used.
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels)
      : gamma_(name + ".gamma", {channels}), beta_(name + ".beta", {channels}),
        running_mean_(name + ".running_mean", {channels}, false),
        running_var_(name + ".running_var", {channels}, false) {
    gamma_.value.fill(T{1});
    running_var_.value.fill(T{1});
  }

  Parameter<T>& beta() { return beta_; }
  Parameter<T>& gamma() { return gamma_; }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (c != gamma_.value.size()) throw Error(gamma_.name + ": channel mismatch");
    Tensor<T> y(x.shape());
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(c, T{0});
    const double count = static_cast<double>(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean, var;
      if (train) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const T* p = x.data() + (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) s += p[j];
        }
        mean = s / count;
        for (std::size_t i = 0; i < n; ++i) {
          const T* p = x.data() + (i * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) s2 += (p[j] - mean) * (p[j] - mean);
        }
        var = s2 / count;
        const double unbiased = count > 1 ? s2 / (count - 1) : var;
        running_mean_.value[ch] = static_cast<T>((1 - kMomentum) * running_mean_.value[ch] + kMomentum * mean);
        running_var_.value[ch] = static_cast<T>((1 - kMomentum) * running_var_.value[ch] + kMomentum * unbiased);
      } else {
        mean = running_mean_.value[ch];
        var = running_var_.value[ch];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + kEps));
      inv_std_[ch] = inv;
      const T m = static_cast<T>(mean), g = gamma_.value[ch], b = beta_.value[ch];
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data() + (i * c + ch) * hw;
        T* xh = xhat_.data() + (i * c + ch) * hw;
        T* q = y.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          xh[j] = (p[j] - m) * inv;
          q[j] = g * xh[j] + b;
        }
      }
    }
    trained_ = train;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor<T> dx(dy.shape());
    const T count = static_cast<T>(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sum_dy{0}, sum_dy_xhat{0};
      for (std::size_t i = 0; i < n; ++i) {
        const T* d = dy.data() + (i * c + ch) * hw;
        const T* xh = xhat_.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          sum_dy += d[j];
          sum_dy_xhat += d[j] * xh[j];
        }
      }
      gamma_.grad[ch] += sum_dy_xhat;
      beta_.grad[ch] += sum_dy;
      const T g = gamma_.value[ch], inv = inv_std_[ch];
      for (std::size_t i = 0; i < n; ++i) {
        const T* d = dy.data() + (i * c + ch) * hw;
        const T* xh = xhat_.data() + (i * c + ch) * hw;
        T* out = dx.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          out[j] = trained_ ? g * inv * (d[j] - sum_dy / count - xh[j] * sum_dy_xhat / count) : g * inv * d[j];
        }
      }
    }
    return dx;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  bool trained_ = false;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] <= T{0})) {  // NaN passes through
        y[i] = x[i];
        mask_[i] = 1;
      }
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = mask_[i] ? dy[i] : T{0};
    return dx;
  }

 private:
  std::vector<unsigned char> mask_;
};

template <typename T>
class MaxPool2d {
 public:
  MaxPool2d(std::size_t kernel = 3, std::size_t stride = 2, std::size_t pad = 1)
      : k_(kernel), stride_(stride), pad_(pad) {}

  std::size_t output_size(std::size_t in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = output_size(h), wo = output_size(w);
    input_shape_ = x.shape();
    Tensor<T> y({n, c, ho, wo});
    argmax_.assign(y.size(), 0);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      const T* src = x.data() + plane * h * w;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t ky = 0; ky < k_; ++ky)
            for (std::size_t kx = 0; kx < k_; ++kx) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
              if (src[idx] > best) {
                best = src[idx];
                best_idx = idx;
              }
            }
          const std::size_t o = plane * ho * wo + oy * wo + ox;
          y[o] = best;
          argmax_[o] = plane * h * w + best_idx;
        }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(input_shape_);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
    return dx;
  }

 private:
  std::size_t k_, stride_, pad_;
  Shape input_shape_;
  std::vector<std::size_t> argmax_;
};

/// (N, C, H, W) -> (N, C)
template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T s{0};
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    y[i] = s / static_cast<T>(hw);
  }
  return y;
}

template <typename T>
Tensor<T> global_average_pool_backward(const Tensor<T>& dy, const Shape& input_shape) {
  Tensor<T> dx(input_shape);
  const std::size_t hw = input_shape[2] * input_shape[3];
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const T g = dy[i] / static_cast<T>(hw);
    for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] = g;
  }
  return dx;
}

/// Affine map (N, in) -> (N, out).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out)
      : weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}), in_(in), out_(out) {}

  void init(Rng& rng) { he_normal(weight_.value, in_, rng); }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != in_) throw Error(weight_.name + ": input shape " + to_string(x.shape()));
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor<T> y({n, out_});
    Eigen::Map<const RowMatrix<T>> xm(x.data(), n, in_);
    Eigen::Map<const RowMatrix<T>> wm(weight_.value.data(), out_, in_);
    Eigen::Map<RowMatrix<T>> ym(y.data(), n, out_);
    ym.noalias() = xm * wm.transpose();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_; ++o) y.at(i, o) += bias_.value[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t n = dy.dim(0);
    Eigen::Map<const RowMatrix<T>> dm(dy.data(), n, out_);
    Eigen::Map<const RowMatrix<T>> xm(input_.data(), n, in_);
    Eigen::Map<const RowMatrix<T>> wm(weight_.value.data(), out_, in_);
    Eigen::Map<RowMatrix<T>> gw(weight_.grad.data(), out_, in_);
    gw.noalias() += dm.transpose() * xm;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += dy.at(i, o);
    Tensor<T> dx({n, in_});
    Eigen::Map<RowMatrix<T>> dxm(dx.data(), n, in_);
    dxm.noalias() = dm * wm;
    return dx;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Parameter<T> weight_, bias_;
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> input_;
};

/// Squeeze-and-excitation channel gating: x * sigmoid(fc2(relu(fc1(gap(x))))).
template <typename T>
class SqueezeExcite {
 public:
  SqueezeExcite() = default;
  SqueezeExcite(const std::string& name, std::size_t channels, std::size_t reduction)
      : fc1_(name + ".fc1", channels, std::max<std::size_t>(1, channels / std::max<std::size_t>(1, reduction))),
        fc2_(name + ".fc2", std::max<std::size_t>(1, channels / std::max<std::size_t>(1, reduction)), channels) {}

  void init(Rng& rng) {
    fc1_.init(rng);
    fc2_.init(rng);
  }

  std::size_t hidden() const { return fc1_.out_features(); }

  Tensor<T> forward(const Tensor<T>& x) {
    input_ = x;
    Tensor<T> squeezed = global_average_pool(x);
    Tensor<T> hidden = relu_.forward(fc1_.forward(squeezed));
    gate_ = fc2_.forward(hidden);
    for (auto& v : gate_.values()) v = sigmoid(v);
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = gate_[i];
      for (std::size_t j = 0; j < hw; ++j) y[i * hw + j] = x[i * hw + j] * g;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor<T> dgate_pre({n, c});
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < n * c; ++i) {
      T s{0};
      const T g = gate_[i];
      for (std::size_t j = 0; j < hw; ++j) {
        s += dy[i * hw + j] * input_[i * hw + j];
        dx[i * hw + j] = dy[i * hw + j] * g;
      }
      dgate_pre[i] = s * g * (T{1} - g);
    }
    Tensor<T> dsqueezed = fc1_.backward(relu_.backward(fc2_.backward(dgate_pre)));
    dx += global_average_pool_backward(dsqueezed, dy.shape());
    return dx;
  }

  void collect(ParameterList<T>& out) {
    fc1_.collect(out);
    fc2_.collect(out);
  }

 private:
  Linear<T> fc1_, fc2_;
  Relu<T> relu_;
  Tensor<T> input_, gate_;
};

}  // namespace dcn
