#pragma once

#include <random>

#include "dcn/layers.hpp"

namespace dcn {

/// Gaussian feature: per-channel mean (b, c, h, w) and one std per spatial
/// location shared by all channels (b, 1, h, w), std in (0, 1).
template <typename T>
struct StochasticFeature {
  Tensor<T> mean;
  Tensor<T> std;
};

template <typename T>
struct StochasticGrad {
  Tensor<T> mean;
  Tensor<T> std;
};

namespace detail {
template <typename T>
void check_stochastic_shapes(const Tensor<T>& mean, const Tensor<T>& std, const Tensor<T>& eps) {
  if (mean.rank() != 4 || std.rank() != 4 || eps.rank() != 4) throw Error("stochastic feature tensors must be rank 4");
  const Shape shared{mean.dim(0), 1, mean.dim(2), mean.dim(3)};
  if (std.shape() != shared) throw Error("std shape " + to_string(std.shape()) + " expected " + to_string(shared));
  if (eps.shape() != shared) throw Error("epsilon shape " + to_string(eps.shape()) + " expected " + to_string(shared));
}
}  // namespace detail

/// Reparameterised draw: mean + eps * std, eps and std broadcast over channels.
template <typename T>
Tensor<T> sample_stochastic(const StochasticFeature<T>& sf, const Tensor<T>& eps) {
  detail::check_stochastic_shapes(sf.mean, sf.std, eps);
  const std::size_t b = sf.mean.dim(0), c = sf.mean.dim(1), hw = sf.mean.dim(2) * sf.mean.dim(3);
  Tensor<T> out(sf.mean.shape());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* m = sf.mean.data() + (n * c + ch) * hw;
      const T* s = sf.std.data() + n * hw;
      const T* e = eps.data() + n * hw;
      T* o = out.data() + (n * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) o[j] = m[j] + e[j] * s[j];
    }
  return out;
}

template <typename T>
StochasticGrad<T> sample_stochastic_backward(const StochasticFeature<T>& sf, const Tensor<T>& eps,
                                             const Tensor<T>& d_out) {
  detail::check_stochastic_shapes(sf.mean, sf.std, eps);
  sf.mean.require_same_shape(d_out, "sample_stochastic_backward");
  const std::size_t b = sf.mean.dim(0), c = sf.mean.dim(1), hw = sf.mean.dim(2) * sf.mean.dim(3);
  StochasticGrad<T> g{d_out, Tensor<T>(sf.std.shape())};
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* d = d_out.data() + (n * c + ch) * hw;
      const T* e = eps.data() + n * hw;
      T* ds = g.std.data() + n * hw;
      for (std::size_t j = 0; j < hw; ++j) ds[j] += d[j] * e[j];
    }
  return g;
}

/// std head activation: sigmoid keeps the std strictly inside (0, 1).
template <typename T>
Tensor<T> std_from_preactivation(const Tensor<T>& pre) {
  Tensor<T> s(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) s[i] = sigmoid(pre[i]);
  return s;
}

template <typename T>
Tensor<T> std_preactivation_backward(const Tensor<T>& std, const Tensor<T>& d_std) {
  Tensor<T> d(std.shape());
  for (std::size_t i = 0; i < std.size(); ++i) d[i] = d_std[i] * std[i] * (T{1} - std[i]);
  return d;
}

/// Standard-normal epsilon shaped (b, 1, h, w); `samples` > 1 averages independent draws.
template <typename T>
Tensor<T> draw_epsilon(std::size_t b, std::size_t h, std::size_t w, Rng& rng, std::size_t samples = 1) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> eps({b, 1, h, w});
  for (auto& v : eps.values()) {
    double acc = 0.0;
    for (std::size_t s = 0; s < samples; ++s) acc += normal(rng);
    v = static_cast<T>(acc / static_cast<double>(samples));
  }
  return eps;
}

}  // namespace dcn
