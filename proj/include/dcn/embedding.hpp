#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "dcn/blocks.hpp"
#include "dcn/stochastic.hpp"

namespace dcn {

struct EmbeddingConfig {
  std::size_t stages = 4;
  std::vector<std::size_t> blocks_per_stage{3, 4, 6, 3};
  std::vector<std::size_t> channels_per_stage{16, 32, 64, 128};
  BlockKind block_kind = BlockKind::squeeze_excite;
  std::size_t se_reduction = 16;
  bool stem = false;  // 7x7 stride-2 conv + 3x3 stride-2 max-pool
  bool noise_enabled = true;
  std::size_t noise_samples = 1;  // epsilon draws averaged per forward pass
  std::size_t num_pretrain_classes = 0;
  std::size_t in_channels = 3;

  /// The 224x224 ImageNet-scale layout: [3,4,6,3] blocks of widths 64..512 behind the stem.
  static EmbeddingConfig imagenet_scale() {
    EmbeddingConfig c;
    c.channels_per_stage = {64, 128, 256, 512};
    c.stem = true;
    return c;
  }

  void validate() const {
    if (stages < 1) throw Error("embedding: stages must be >= 1");
    if (blocks_per_stage.size() != stages || channels_per_stage.size() != stages)
      throw Error("embedding: blocks_per_stage and channels_per_stage must have length " + std::to_string(stages));
    for (std::size_t v = 0; v < stages; ++v) {
      if (blocks_per_stage[v] < 1) throw Error("embedding: every stage needs at least one block");
      if (channels_per_stage[v] < 1) throw Error("embedding: channel widths must be positive");
      if (v > 0 && channels_per_stage[v] < channels_per_stage[v - 1])
        throw Error("embedding: channel widths must not decrease across stages");
    }
    if (noise_samples < 1) throw Error("embedding: noise_samples must be >= 1");
    if (se_reduction < 1) throw Error("embedding: se_reduction must be >= 1");
  }

  friend bool operator==(const EmbeddingConfig&, const EmbeddingConfig&) = default;
};

/// One feature map per level, level v shaped (b, c_v, h_v, w_v).
template <typename T>
struct FeatureHierarchy {
  std::vector<Tensor<T>> levels;
  std::size_t batch() const { return levels.empty() ? 0 : levels.front().dim(0); }
};

enum class NoiseMode { deterministic, sample };

/// Siamese staged embedding. The same instance embeds support and query images.
template <typename T>
class EmbeddingColumn {
 public:
  explicit EmbeddingColumn(EmbeddingConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t first = config_.channels_per_stage.front();
    if (config_.stem) {
      stem_conv_.emplace("stem.conv", config_.in_channels, first, 7, 2, 3);
      stem_bn_.emplace("stem.bn", first);
    }
    std::size_t in = config_.stem ? first : config_.in_channels;
    for (std::size_t v = 0; v < config_.stages; ++v) {
      const std::size_t width = config_.channels_per_stage[v];
      const std::size_t stride = (v == 0 && config_.stem) ? 1 : 2;
      std::vector<Block<T>> stage;
      for (std::size_t b = 0; b < config_.blocks_per_stage[v]; ++b) {
        const bool last = b + 1 == config_.blocks_per_stage[v];
        const std::string name = "embed.stage" + std::to_string(v + 1) + ".block" + std::to_string(b + 1);
        stage.emplace_back(name, config_.block_kind, b == 0 ? in : width, width, width, b == 0 ? stride : 1,
                           config_.se_reduction, last && config_.noise_enabled);
      }
      stages_.push_back(std::move(stage));
      in = width;
    }
    if (config_.num_pretrain_classes > 0)
      classifier_.emplace("embed.classifier", config_.channels_per_stage.back(), config_.num_pretrain_classes);
  }

  void init(Rng& rng) {
    if (stem_conv_) stem_conv_->init(rng);
    for (auto& stage : stages_)
      for (auto& block : stage) block.init(rng);
    if (classifier_) classifier_->init(rng);
  }

  const EmbeddingConfig& config() const { return config_; }

  /// Spatial size of each level for a square input; throws when a stage
  /// would have to downsample a map that is already 1 pixel wide.
  std::vector<std::size_t> level_sizes(std::size_t input_size) const {
    std::size_t s = input_size;
    auto halve = [&](std::size_t size, const char* where) {
      if (size < 2)
        throw Error("input of size " + std::to_string(input_size) + " is too small to survive " +
                    std::to_string(config_.stages) + " downsamplings (" + where + ")");
      return (size + 1) / 2;
    };
    if (config_.stem) {
      s = halve(s, "stem conv");
      s = halve(s, "stem pool");
    }
    std::vector<std::size_t> sizes;
    for (std::size_t v = 0; v < config_.stages; ++v) {
      if (!(v == 0 && config_.stem)) s = halve(s, "stage");
      sizes.push_back(s);
    }
    return sizes;
  }

  /// Embeds a batch (b, c, h, w). `update_batch_stats` selects training-mode batch norm.
  FeatureHierarchy<T> embed(const Tensor<T>& images, NoiseMode mode, Rng& rng, bool update_batch_stats = false) {
    if (images.rank() != 4 || images.dim(0) == 0) throw Error("embed: expected a non-empty (b, c, h, w) batch");
    if (images.dim(1) != config_.in_channels)
      throw Error("embed: expected " + std::to_string(config_.in_channels) + " channels");
    level_sizes(std::min(images.dim(2), images.dim(3)));

    const bool train = update_batch_stats;
    Tensor<T> x = images;
    if (stem_conv_) x = stem_pool_.forward(stem_relu_.forward(stem_bn_->forward(stem_conv_->forward(x), train)));

    cache_.assign(config_.stages, {});
    FeatureHierarchy<T> out;
    for (std::size_t v = 0; v < config_.stages; ++v) {
      auto& stage = stages_[v];
      for (std::size_t b = 0; b + 1 < stage.size(); ++b) x = stage[b].forward(x, train).mean;
      BlockOutput<T> last = stage.back().forward(x, train);
      auto& cache = cache_[v];
      if (config_.noise_enabled && mode == NoiseMode::sample) {
        cache.feature = StochasticFeature<T>{std::move(last.mean), std::move(last.std)};
        cache.eps = draw_epsilon<T>(cache.feature.mean.dim(0), cache.feature.mean.dim(2), cache.feature.mean.dim(3),
                                    rng, config_.noise_samples);
        cache.sampled = true;
        x = sample_stochastic(cache.feature, cache.eps);
      } else {
        cache.sampled = false;
        x = std::move(last.mean);
      }
      out.levels.push_back(x);
    }
    return out;
  }

  /// Global average pool then affine map to C' logits.
  Tensor<T> classify_logits(const Tensor<T>& final_level) {
    if (!classifier_) throw Error("classify_logits: number of pretraining classes is unset");
    final_shape_ = final_level.shape();
    return classifier_->forward(global_average_pool(final_level));
  }

  /// Backpropagates a logit gradient through the most recent embed/classify pair.
  void backward_logits(const Tensor<T>& d_logits) {
    if (!classifier_) throw Error("backward_logits: no classifier head");
    Tensor<T> d = global_average_pool_backward(classifier_->backward(d_logits), final_shape_);
    for (std::size_t v = config_.stages; v-- > 0;) {
      auto& stage = stages_[v];
      auto& cache = cache_[v];
      if (cache.sampled) {
        StochasticGrad<T> g = sample_stochastic_backward(cache.feature, cache.eps, d);
        d = stage.back().backward(g.mean, g.std);
      } else {
        d = stage.back().backward(d);
      }
      for (std::size_t b = stage.size() - 1; b-- > 0;) d = stage[b].backward(d);
    }
    if (stem_conv_) stem_conv_->backward(stem_bn_->backward(stem_relu_.backward(stem_pool_.backward(d))));
  }

  /// Replaces the classifier head with a freshly initialised one of `classes` outputs.
  void reset_classifier(std::size_t classes, Rng& rng) {
    config_.num_pretrain_classes = classes;
    classifier_.emplace("embed.classifier", config_.channels_per_stage.back(), classes);
    classifier_->init(rng);
  }

  ParameterList<T> parameters() {
    ParameterList<T> out;
    if (stem_conv_) {
      stem_conv_->collect(out);
      stem_bn_->collect(out);
    }
    for (auto& stage : stages_)
      for (auto& block : stage) block.collect(out);
    if (classifier_) classifier_->collect(out);
    return out;
  }

 private:
  struct StageCache {
    StochasticFeature<T> feature;
    Tensor<T> eps;
    bool sampled = false;
  };

  EmbeddingConfig config_;
  std::optional<Conv2d<T>> stem_conv_;
  std::optional<BatchNorm2d<T>> stem_bn_;
  Relu<T> stem_relu_;
  MaxPool2d<T> stem_pool_{3, 2, 1};
  std::vector<std::vector<Block<T>>> stages_;
  std::optional<Linear<T>> classifier_;
  std::vector<StageCache> cache_;
  Shape final_shape_;
};

}  // namespace dcn
