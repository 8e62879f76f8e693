#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "dcn/model.hpp"

namespace dcn::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
}

/// Checks backward() of y = forward(x) against central differences of <y, r>
/// for the input and every trainable parameter. Returns the worst relative error.
inline double max_gradient_error(Tensor<double>& x, const ParameterList<double>& params,
                                 const std::function<Tensor<double>(const Tensor<double>&)>& forward,
                                 const std::function<Tensor<double>(const Tensor<double>&)>& backward, Rng& rng,
                                 double h = 1e-6, std::size_t max_entries = 40) {
  const Tensor<double> y = forward(x);
  const Tensor<double> r = random_tensor(y.shape(), rng);
  zero_grad(params);
  const Tensor<double> dx = backward(r);

  double worst = 0.0;
  auto probe = [&](Tensor<double>& target, const Tensor<double>& analytic) {
    std::uniform_int_distribution<std::size_t> pick(0, target.size() - 1);
    const std::size_t n = std::min(max_entries, target.size());
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = target.size() <= max_entries ? k : pick(rng);
      const double saved = target[i];
      target[i] = saved + h;
      const double up = dot(forward(x), r);
      target[i] = saved - h;
      const double down = dot(forward(x), r);
      target[i] = saved;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * h)));
    }
  };
  probe(x, dx);
  for (auto* p : params) {
    if (!p->trainable) continue;
    const Tensor<double> g = p->grad;
    probe(p->value, g);
  }
  return worst;
}

inline EmbeddingConfig tiny_embedding(std::vector<std::size_t> channels = {8, 16, 32, 32}) {
  EmbeddingConfig c;
  c.channels_per_stage = std::move(channels);
  c.blocks_per_stage.assign(c.channels_per_stage.size(), 1);
  c.stages = c.channels_per_stage.size();
  return c;
}

inline RelationConfig tiny_relation(std::size_t stages = 4) {
  RelationConfig c;
  c.stages = stages;
  c.blocks_per_stage = 1;
  if (stages != 4) c.score_weights.assign(stages, 1.0);
  return c;
}

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dcn_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dcn::testing
