#pragma once

#include <span>
#include <vector>

#include "dcn/blocks.hpp"
#include "dcn/embedding.hpp"

namespace dcn {

struct RelationConfig {
  std::size_t stages = 4;
  std::size_t blocks_per_stage = 2;
  /// Output width of each relation module; empty means derived from the embedding widths.
  std::vector<std::size_t> channels_per_stage;
  std::vector<double> score_weights{0.3, 0.4, 0.5, 1.0};
  BlockKind block_kind = BlockKind::squeeze_excite;
  std::size_t se_reduction = 16;

  /// Module v emits the width of embedding level v+1 (the last module keeps
  /// level V's width), so module v+1 reads 3x its embedding width.
  static std::vector<std::size_t> derived_channels(const std::vector<std::size_t>& embedding_channels) {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < embedding_channels.size(); ++v)
      out.push_back(embedding_channels[std::min(v + 1, embedding_channels.size() - 1)]);
    return out;
  }

  void validate() const {
    if (stages < 1) throw Error("relation: stages must be >= 1");
    if (blocks_per_stage < 1) throw Error("relation: blocks_per_stage must be >= 1");
    if (score_weights.size() != stages)
      throw Error("relation: score_weights must have length " + std::to_string(stages));
    for (double w : score_weights)
      if (!(w > 0.0)) throw Error("relation: every score weight must be > 0");
    if (!channels_per_stage.empty() && channels_per_stage.size() != stages)
      throw Error("relation: channels_per_stage must be empty or have length " + std::to_string(stages));
  }

  friend bool operator==(const RelationConfig&, const RelationConfig&) = default;
};

/// Per level, one sample-axis averaged feature map per episode class: (C, c_v, h_v, w_v).
template <typename T>
struct ClassPrototypeHierarchy {
  std::vector<Tensor<T>> levels;
  std::size_t classes() const { return levels.empty() ? 0 : levels.front().dim(0); }
};

/// Averages the support features of each episode class. `labels[i]` is the
/// episode-local class of support sample i.
template <typename T>
ClassPrototypeHierarchy<T> class_prototypes(const FeatureHierarchy<T>& support, std::span<const std::size_t> labels,
                                            std::size_t classes) {
  if (labels.size() != support.batch()) throw Error("class_prototypes: one label per support sample required");
  std::vector<std::size_t> counts(classes, 0);
  for (auto y : labels) {
    if (y >= classes) throw Error("class_prototypes: label out of range");
    ++counts[y];
  }
  for (std::size_t c = 0; c < classes; ++c)
    if (counts[c] == 0) throw Error("class_prototypes: class " + std::to_string(c) + " has no support features");

  ClassPrototypeHierarchy<T> out;
  for (const auto& level : support.levels) {
    const std::size_t chw = level.dim(1) * level.dim(2) * level.dim(3);
    Tensor<T> proto({classes, level.dim(1), level.dim(2), level.dim(3)});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      T* dst = proto.data() + labels[i] * chw;
      const T* src = level.data() + i * chw;
      for (std::size_t j = 0; j < chw; ++j) dst[j] += src[j];
    }
    for (std::size_t c = 0; c < classes; ++c) {
      const T inv = T{1} / static_cast<T>(counts[c]);
      for (std::size_t j = 0; j < chw; ++j) proto[c * chw + j] *= inv;
    }
    out.levels.push_back(std::move(proto));
  }
  return out;
}

/// Scores for every (query, class) pair, row p = query * classes + class.
/// `pre` holds the score-head pre-activations, `scores` their sigmoids.
template <typename T>
struct RelationScores {
  std::size_t queries = 0;
  std::size_t classes = 0;
  Tensor<T> pre;     // (pairs, V)
  Tensor<T> scores;  // (pairs, V), each in [0, 1]

  std::size_t pairs() const { return queries * classes; }
  std::size_t levels() const { return scores.dim(1); }
  T score(std::size_t q, std::size_t c, std::size_t v) const { return scores.at(q * classes + c, v); }
};

/// Weighted combination of the per-level scores: sum_v w_v * r_v.
inline double aggregate_scores(std::span<const double> scores, std::span<const double> weights) {
  if (scores.size() != weights.size())
    throw Error("aggregate_scores: " + std::to_string(scores.size()) + " scores vs " +
                std::to_string(weights.size()) + " weights");
  double s = 0.0;
  for (std::size_t v = 0; v < scores.size(); ++v) s += weights[v] * scores[v];
  return s;
}

/// Index of the largest aggregate; ties go to the lowest index.
inline std::size_t predict(std::span<const double> aggregates) {
  if (aggregates.empty()) throw Error("predict: no class scores");
  std::size_t best = 0;
  for (std::size_t c = 1; c < aggregates.size(); ++c)
    if (aggregates[c] > aggregates[best]) best = c;
  return best;
}

/// Column of relation modules. Module v reads [query_v, prototype_v, g_{v-1}]
/// along channels and emits a similarity map g_v at level v+1's resolution
/// plus a score through pool -> affine -> sigmoid.
template <typename T>
class RelationColumn {
 public:
  RelationColumn(RelationConfig config, const std::vector<std::size_t>& embedding_channels)
      : config_(std::move(config)), embedding_channels_(embedding_channels) {
    config_.validate();
    if (embedding_channels_.size() != config_.stages)
      throw Error("relation: stage count differs from the embedding's level count");
    if (config_.channels_per_stage.empty()) config_.channels_per_stage = RelationConfig::derived_channels(embedding_channels_);
    for (std::size_t v = 0; v < config_.stages; ++v) {
      Module m;
      m.feature_channels = embedding_channels_[v];
      m.chain_channels = v == 0 ? 0 : config_.channels_per_stage[v - 1];
      const std::size_t in = 2 * m.feature_channels + m.chain_channels;
      const std::size_t out = config_.channels_per_stage[v];
      const std::size_t stride = v + 1 < config_.stages ? 2 : 1;
      const std::string name = "relation.module" + std::to_string(v + 1);
      for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
        const std::string bname = name + ".block" + std::to_string(b + 1);
        if (b == 0)
          m.blocks.emplace_back(bname, config_.block_kind, in, in, out, stride, config_.se_reduction, false);
        else
          m.blocks.emplace_back(bname, config_.block_kind, out, out, out, 1, config_.se_reduction, false);
      }
      m.head = Linear<T>(name + ".score", out, 1);
      modules_.push_back(std::move(m));
    }
  }

  void init(Rng& rng) {
    for (auto& m : modules_) {
      for (auto& b : m.blocks) b.init(rng);
      m.head.init(rng);
    }
  }

  const RelationConfig& config() const { return config_; }
  const std::vector<std::size_t>& embedding_channels() const { return embedding_channels_; }

  /// Spatial output size of each module for the given level sizes.
  std::vector<std::size_t> output_sizes(const std::vector<std::size_t>& level_sizes) const {
    std::vector<std::size_t> out;
    for (std::size_t v = 0; v < modules_.size(); ++v) out.push_back(modules_[v].blocks.front().output_size(level_sizes[v]));
    return out;
  }

  /// Output shape of module v (0-based) in the last forward pass.
  const Shape& last_output_shape(std::size_t v) const { return modules_.at(v).output_shape; }

  RelationScores<T> forward(const FeatureHierarchy<T>& queries, const ClassPrototypeHierarchy<T>& prototypes,
                            bool train) {
    if (queries.levels.size() != config_.stages || prototypes.levels.size() != config_.stages)
      throw Error("relation_forward: expected " + std::to_string(config_.stages) + " levels");
    const std::size_t nq = queries.batch(), nc = prototypes.classes(), pairs = nq * nc;
    RelationScores<T> result;
    result.queries = nq;
    result.classes = nc;
    result.pre = Tensor<T>({pairs, config_.stages});
    result.scores = Tensor<T>({pairs, config_.stages});

    Tensor<T> chain;
    for (std::size_t v = 0; v < config_.stages; ++v) {
      auto& m = modules_[v];
      const auto& q = queries.levels[v];
      const auto& p = prototypes.levels[v];
      if (q.dim(1) != m.feature_channels || p.dim(1) != m.feature_channels || q.dim(2) != p.dim(2) ||
          q.dim(3) != p.dim(3))
        throw Error("relation_forward: level " + std::to_string(v + 1) + " shape mismatch, query " +
                    to_string(q.shape()) + " prototype " + to_string(p.shape()));
      if (v > 0 && (chain.dim(2) != q.dim(2) || chain.dim(3) != q.dim(3)))
        throw Error("relation_forward: previous similarity map " + to_string(chain.shape()) +
                    " does not match level " + std::to_string(v + 1) + " features " + to_string(q.shape()));
      Tensor<T> x = pair_input(q, p, v > 0 ? &chain : nullptr);
      for (auto& b : m.blocks) x = b.forward(x, train).mean;
      m.output_shape = x.shape();
      Tensor<T> pre = m.head.forward(global_average_pool(x));
      for (std::size_t i = 0; i < pairs; ++i) {
        result.pre.at(i, v) = pre[i];
        result.scores.at(i, v) = sigmoid(pre[i]);
      }
      chain = std::move(x);
    }
    return result;
  }

  /// Accumulates parameter gradients given d(loss)/d(pre-activation), shape (pairs, V).
  void backward(const Tensor<T>& d_pre) {
    const std::size_t pairs = d_pre.dim(0);
    Tensor<T> d_chain;
    for (std::size_t v = config_.stages; v-- > 0;) {
      auto& m = modules_[v];
      Tensor<T> d_head({pairs, 1});
      for (std::size_t i = 0; i < pairs; ++i) d_head[i] = d_pre.at(i, v);
      Tensor<T> d = global_average_pool_backward(m.head.backward(d_head), m.output_shape);
      if (!d_chain.empty()) d += d_chain;
      for (std::size_t b = m.blocks.size(); b-- > 0;) d = m.blocks[b].backward(d);
      if (v > 0) d_chain = slice_channels(d, 2 * m.feature_channels, 2 * m.feature_channels + m.chain_channels);
    }
  }

  /// Severs the chain into module v (1-based, v >= 2): zeroes every weight reading g_{v-1}.
  void zero_chain_inputs(std::size_t v) {
    if (v < 2 || v > modules_.size()) throw Error("zero_chain_inputs: module index out of range");
    auto& m = modules_[v - 1];
    m.blocks.front().zero_input_channels(2 * m.feature_channels, 2 * m.feature_channels + m.chain_channels);
  }

  ParameterList<T> parameters() {
    ParameterList<T> out;
    for (auto& m : modules_) {
      for (auto& b : m.blocks) b.collect(out);
      m.head.collect(out);
    }
    return out;
  }

 private:
  struct Module {
    std::size_t feature_channels = 0;
    std::size_t chain_channels = 0;
    std::vector<Block<T>> blocks;
    Linear<T> head;
    Shape output_shape;
  };

  /// (pairs, 2c [+ chain], h, w) with pair p = q * classes + c.
  static Tensor<T> pair_input(const Tensor<T>& q, const Tensor<T>& p, const Tensor<T>* chain) {
    const std::size_t nq = q.dim(0), nc = p.dim(0), c = q.dim(1), hw = q.dim(2) * q.dim(3);
    const std::size_t gc = chain ? chain->dim(1) : 0, total = 2 * c + gc;
    Tensor<T> x({nq * nc, total, q.dim(2), q.dim(3)});
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nc; ++j) {
        const std::size_t pair = i * nc + j;
        T* dst = x.data() + pair * total * hw;
        std::copy_n(q.data() + i * c * hw, c * hw, dst);
        std::copy_n(p.data() + j * c * hw, c * hw, dst + c * hw);
        if (chain) std::copy_n(chain->data() + pair * gc * hw, gc * hw, dst + 2 * c * hw);
      }
    return x;
  }

  RelationConfig config_;
  std::vector<std::size_t> embedding_channels_;
  std::vector<Module> modules_;
};

}  // namespace dcn
