#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "dcn/tensor.hpp"

namespace dcn {

/// Scores are clamped to [eps, 1 - eps] before the log terms.
inline constexpr double kScoreClamp = 1e-7;

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // d(loss) / d(input the loss was called with, see each function)
};

inline double binary_cross_entropy(double score, int label) {
  const double r = std::clamp(score, kScoreClamp, 1.0 - kScoreClamp);
  return label == 1 ? -std::log(r) : -std::log(1.0 - r);
}

/// Deeply supervised weighted BCE over (query, class) pairs.
///
/// `scores` is (pairs, V) of sigmoid outputs, `labels[p]` is 1 when pair p
/// matches. The loss is the mean over pairs of sum_v w_v * BCE(r_v, label);
/// without deep supervision only the last level counts, with weight 1.
/// `grad` is taken with respect to the score-head pre-activations.
template <typename T>
LossResult<T> deep_supervised_loss(const Tensor<T>& scores, std::span<const int> labels,
                                   std::span<const double> weights, bool deep_supervision) {
  if (scores.rank() != 2) throw Error("deep_supervised_loss: scores must be (pairs, levels)");
  const std::size_t pairs = scores.dim(0), levels = scores.dim(1);
  if (labels.size() != pairs) throw Error("deep_supervised_loss: one label per pair required");
  if (weights.size() != levels) throw Error("deep_supervised_loss: one weight per level required");
  if (pairs == 0) throw Error("deep_supervised_loss: no pairs");

  std::vector<double> w(weights.begin(), weights.end());
  if (!deep_supervision) {
    std::fill(w.begin(), w.end(), 0.0);
    w.back() = 1.0;
  }
  LossResult<T> out{0.0, Tensor<T>(scores.shape())};
  const double inv_pairs = 1.0 / static_cast<double>(pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    const int y = labels[p];
    if (y != 0 && y != 1) throw Error("deep_supervised_loss: label " + std::to_string(y) + " is not 0 or 1");
    for (std::size_t v = 0; v < levels; ++v) {
      if (w[v] == 0.0) continue;
      const double r = static_cast<double>(scores.at(p, v));
      out.value += w[v] * binary_cross_entropy(r, y) * inv_pairs;
      const bool clamped = r < kScoreClamp || r > 1.0 - kScoreClamp;
      out.grad.at(p, v) = clamped ? T{0} : static_cast<T>(w[v] * inv_pairs * (r - y));
    }
  }
  return out;
}

/// Mean softmax cross-entropy; `grad` is with respect to the logits.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw Error("softmax_cross_entropy: one label per row required");
  LossResult<T> out{0.0, Tensor<T>(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) throw Error("softmax_cross_entropy: label out of range");
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, logits.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at(i, j) - mx);
    const double log_z = std::log(z) + mx;
    out.value += (log_z - logits.at(i, labels[i])) / static_cast<double>(n);
    for (std::size_t j = 0; j < k; ++j) {
      const double prob = std::exp(logits.at(i, j) - log_z);
      out.grad.at(i, j) = static_cast<T>((prob - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  return out;
}

}  // namespace dcn
