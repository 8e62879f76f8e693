#pragma once

#include <cmath>

#include "dcn/layers.hpp"

namespace dcn {

/// Piecewise-constant decay: initial / factor^floor(step / every).
struct StepSchedule {
  double initial = 0.1;
  double factor = 5.0;
  std::size_t every = 60;

  double at(std::size_t step) const {
    return initial / std::pow(factor, static_cast<double>(every ? step / every : 0));
  }
};

/// SGD with heavy-ball momentum and L2 weight decay; buffers are skipped.
template <typename T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (auto* p : params_) velocity_.emplace_back(p->trainable ? Tensor<T>(p->value.shape()) : Tensor<T>());
  }

  void zero_grad() { dcn::zero_grad(params_); }

  void step(double lr) {
    const T m = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->trainable) continue;
      auto& vel = velocity_[i];
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        vel[j] = m * vel[j] + p->grad[j] + wd * p->value[j];
        p->value[j] -= rate * vel[j];
      }
    }
  }

 private:
  ParameterList<T> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_, weight_decay_;
};

}  // namespace dcn
