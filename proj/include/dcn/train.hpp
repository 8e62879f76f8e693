#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>

#include "dcn/loss.hpp"
#include "dcn/model.hpp"
#include "dcn/optim.hpp"

namespace dcn {

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double initial_lr = 0.1;
  double lr_decay_factor = 5.0;
  std::size_t lr_decay_every = 60;  // epochs
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;
  /// Whether the classifier head sees sampled (rather than mean) features when noise is on.
  bool sampled_features = true;

  StepSchedule schedule() const { return {initial_lr, lr_decay_factor, lr_decay_every}; }
};

struct RelationTrainConfig {
  std::size_t episodes = 2000;
  EpisodeSpec episode{5, 1, 5};
  double initial_lr = 0.01;
  double lr_decay_factor = 5.0;
  std::size_t lr_decay_every = 1000;  // episodes
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t eval_every = 200;
  std::size_t val_episodes = 50;
  std::size_t val_queries = 15;
  std::size_t patience = 3;
  bool augment = true;

  StepSchedule schedule() const { return {initial_lr, lr_decay_factor, lr_decay_every}; }
};

struct TrainConfig {
  PretrainConfig pretrain;
  RelationTrainConfig relation;
  AugmentConfig augment;
  bool deep_supervision = true;
  bool retrain = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(pretrain.initial_lr > 0) || !(relation.initial_lr > 0)) throw Error("train: learning rates must be > 0");
    if (!(pretrain.lr_decay_factor > 0) || !(relation.lr_decay_factor > 0))
      throw Error("train: lr decay factors must be > 0");
    if (relation.patience < 1) throw Error("train: patience must be >= 1");
    if (pretrain.batch_size < 1) throw Error("train: batch_size must be >= 1");
    if (relation.eval_every < 1) throw Error("train: eval_every must be >= 1");
    relation.episode.validate(true);
  }
};

/// One line of the training log.
struct HistoryRecord {
  std::string phase;
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_acc;
  std::optional<double> train_acc;

  friend bool operator==(const HistoryRecord&, const HistoryRecord&) = default;
};

using History = std::vector<HistoryRecord>;
using HistorySink = std::function<void(const HistoryRecord&)>;

class Recorder {
 public:
  Recorder(History* history, HistorySink sink) : history_(history), sink_(std::move(sink)) {}
  void operator()(HistoryRecord r) const {
    if (sink_) sink_(r);
    if (history_) history_->push_back(std::move(r));
  }

 private:
  History* history_;
  HistorySink sink_;
};

namespace detail {
inline void require_finite(double loss, const std::string& phase, std::size_t step) {
  if (!std::isfinite(loss))
    throw Error(phase + " diverged: non-finite loss at step " + std::to_string(step) +
                " (try a lower learning rate)");
}

/// Fraction of queries whose weighted aggregate picks the right class.
inline double episode_accuracy(const ScoreTable& t, std::span<const std::size_t> labels,
                               std::span<const double> weights) {
  std::size_t correct = 0;
  std::vector<double> agg(t.classes);
  for (std::size_t q = 0; q < t.queries; ++q) {
    for (std::size_t c = 0; c < t.classes; ++c) agg[c] = aggregate_scores(t.vector(q, c), weights);
    if (predict(agg) == labels[q]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(t.queries);
}
}  // namespace detail

/// Phase 1: trains the embedding as a C'-way classifier over `classes` with cross-entropy.
inline EmbeddingColumn<Real> pretrain_embedding(const Dataset& ds, const std::vector<std::size_t>& classes,
                                                EmbeddingConfig config, const TrainConfig& train, Rng& rng,
                                                const Recorder& record, const std::string& phase = "pretrain") {
  if (classes.empty()) throw Error("pretrain: no training classes");
  config.num_pretrain_classes = classes.size();
  EmbeddingColumn<Real> embedding(config);
  embedding.init(rng);

  std::map<std::size_t, std::size_t> label_of;
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    label_of[classes[k]] = k;
    ids.insert(ids.end(), ds.by_class.at(classes[k]).begin(), ds.by_class.at(classes[k]).end());
  }
  const auto& pc = train.pretrain;
  AugmentConfig aug = train.augment;
  aug.out_size = ds.image_size;
  const NoiseMode mode = pc.sampled_features ? NoiseMode::sample : NoiseMode::deterministic;

  Sgd<Real> opt(embedding.parameters(), pc.momentum, pc.weight_decay);
  const StepSchedule schedule = pc.schedule();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < pc.epochs; ++epoch) {
    const double lr = schedule.at(epoch);
    std::shuffle(ids.begin(), ids.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < ids.size(); start += pc.batch_size) {
      const std::size_t end = std::min(ids.size(), start + pc.batch_size);
      std::span<const std::size_t> batch_ids(ids.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (auto id : batch_ids) labels.push_back(label_of.at(ds.images[id].label));

      const Tensor<Real> batch = make_batch(ds, batch_ids, &rng, pc.augment ? &aug : nullptr);
      const auto features = embedding.embed(batch, mode, rng, true);
      const Tensor<Real> logits = embedding.classify_logits(features.levels.back());
      const auto loss = softmax_cross_entropy(logits, std::span<const std::size_t>(labels));
      detail::require_finite(loss.value, phase, step);

      opt.zero_grad();
      embedding.backward_logits(loss.grad);
      opt.step(lr);
      ++step;

      loss_sum += loss.value * static_cast<double>(labels.size());
      for (std::size_t i = 0; i < labels.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.dim(1); ++j)
          if (logits.at(i, j) > logits.at(i, best)) best = j;
        correct += best == labels[i];
      }
      seen += labels.size();
    }
    record({phase, epoch + 1, loss_sum / static_cast<double>(seen), lr, std::nullopt,
            static_cast<double>(correct) / static_cast<double>(seen)});
  }
  return embedding;
}

/// 1 where the query's episode class equals the pair's class, row p = q * C + c.
inline std::vector<int> match_labels(const Episode& ep) {
  std::vector<int> y;
  y.reserve(ep.query.size() * ep.ways());
  for (auto label : ep.query_labels)
    for (std::size_t c = 0; c < ep.ways(); ++c) y.push_back(label == c ? 1 : 0);
  return y;
}

struct RelationOutcome {
  std::size_t best_episode_count = 0;
  std::optional<double> best_val_accuracy;
};

/// Mean weighted-aggregate accuracy over `episodes` validation episodes drawn from a fixed stream.
inline double validation_accuracy(Model& model, const Dataset& ds, const std::vector<std::size_t>& classes,
                                  const RelationTrainConfig& rc, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 4);
  EpisodeSpec spec = rc.episode;
  spec.queries = rc.val_queries;
  double total = 0.0;
  for (std::size_t e = 0; e < rc.val_episodes; ++e) {
    const Episode ep = sample_episode(ds, classes, spec, rng);
    total += detail::episode_accuracy(score_episode(model, ds, ep), ep.query_labels,
                                      model.relation.config().score_weights);
  }
  return total / static_cast<double>(std::max<std::size_t>(rc.val_episodes, 1));
}

/// Phase 2: re-initialises and trains `model.relation` on episodes while
/// `model.embedding` stays frozen (inference-mode batch norm, no updates).
/// With `val_classes` non-empty, every eval_every episodes the model is scored
/// on validation episodes; the best parameters and their episode count are
/// kept and training stops after `patience` evaluations without improvement.
/// Without validation, exactly `episodes` episodes are run.
inline RelationOutcome train_relation(const Dataset& ds, const std::vector<std::size_t>& train_classes,
                                      const std::vector<std::size_t>& val_classes, Model& model,
                                      const TrainConfig& train, std::size_t episodes, Rng& rng,
                                      const Recorder& record, const std::string& phase = "relation") {
  model.relation.init(rng);
  const auto& rc = train.relation;
  AugmentConfig aug = train.augment;
  aug.out_size = ds.image_size;
  const bool validate = !val_classes.empty();
  const auto weights = model.relation.config().score_weights;
  auto params = model.relation.parameters();
  Sgd<Real> opt(params, rc.momentum, rc.weight_decay);
  const StepSchedule schedule = rc.schedule();

  RelationOutcome result;
  std::vector<Tensor<Real>> best;
  std::size_t stale = 0;
  std::size_t done = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const Episode ep = sample_episode(ds, train_classes, rc.episode, rng, true);
    std::vector<std::size_t> ids = ep.support;
    ids.insert(ids.end(), ep.query.begin(), ep.query.end());
    const Tensor<Real> batch = make_batch(ds, ids, &rng, rc.augment ? &aug : nullptr);
    const auto all = model.embedding.embed(batch, NoiseMode::sample, rng, false);
    auto [support, query] = split_hierarchy(all, ep.support.size());
    const auto protos = class_prototypes(support, ep.support_labels, ep.ways());
    const auto scores = model.relation.forward(query, protos, true);
    const auto labels = match_labels(ep);
    const auto loss = deep_supervised_loss(scores.scores, std::span<const int>(labels), std::span<const double>(weights),
                                           train.deep_supervision);
    detail::require_finite(loss.value, phase, e);

    const double lr = schedule.at(e);
    opt.zero_grad();
    model.relation.backward(loss.grad);
    opt.step(lr);
    done = e + 1;

    HistoryRecord rec{phase, done, loss.value, lr, std::nullopt, std::nullopt};
    if (validate && done % rc.eval_every == 0) {
      const double acc = validation_accuracy(model, ds, val_classes, rc, train.seed);
      rec.val_acc = acc;
      if (!result.best_val_accuracy || acc > *result.best_val_accuracy) {
        result.best_val_accuracy = acc;
        result.best_episode_count = done;
        best = snapshot(params);
        stale = 0;
      } else {
        ++stale;
      }
    }
    record(rec);
    if (validate && stale >= rc.patience) break;
  }
  if (result.best_val_accuracy)
    restore(params, best);
  else
    result.best_episode_count = done;
  return result;
}

/// Everything a finished run produces.
struct TrainedModel {
  Model model;
  std::array<float, 3> channel_mean{0.f, 0.f, 0.f};
  History history;
  std::size_t best_episode_count = 0;
  std::optional<double> best_val_accuracy;
};

/// Phase 3: pretrains a fresh embedding on meta_train + meta_val and trains a
/// fresh relation column for exactly `best_episode_count` episodes.
inline TrainedModel retrain_full(const Dataset& ds, const DatasetSplit& split, const EmbeddingConfig& embed_config,
                                 const RelationConfig& rel_config, const TrainConfig& train,
                                 std::size_t best_episode_count, Rng& rng, const Recorder& record) {
  if (best_episode_count == 0) throw Error("retrain: best episode count must be positive");
  const auto classes = split.train_and_val();
  auto embedding = pretrain_embedding(ds, classes, embed_config, train, rng, record, "retrain_pretrain");
  TrainedModel out{Model(embedding.config(), rel_config), ds.channel_mean, {}, best_episode_count, std::nullopt};
  out.model.embedding = std::move(embedding);
  train_relation(ds, classes, {}, out.model, train, best_episode_count, rng, record, "retrain_relation");
  return out;
}

/// Hooks fired as phases finish, e.g. to write checkpoints.
struct PipelineHooks {
  HistorySink log;
  std::function<void(const std::string& name, TrainedModel&)> checkpoint;
};

/// pretrain -> relation (early-stopped on meta_val) -> optional retrain on meta_train + meta_val.
inline TrainedModel run_pipeline(const Dataset& ds, const DatasetSplit& split, const EmbeddingConfig& embed_config,
                                 const RelationConfig& rel_config, const TrainConfig& train,
                                 const PipelineHooks& hooks = {}) {
  train.validate();
  split.check_disjoint();
  History history;
  Recorder record(&history, hooks.log);

  Rng pre_rng = derive_rng(train.seed, 1);
  auto embedding = pretrain_embedding(ds, split.meta_train, embed_config, train, pre_rng, record);
  TrainedModel phase2{Model(embedding.config(), rel_config), ds.channel_mean, {}, 0, std::nullopt};
  phase2.model.embedding = std::move(embedding);
  if (hooks.checkpoint) {
    Rng init_rng = derive_rng(train.seed, 5);
    phase2.model.relation.init(init_rng);
    phase2.history = history;
    hooks.checkpoint("pretrain", phase2);
  }

  Rng rel_rng = derive_rng(train.seed, 2);
  const auto outcome = train_relation(ds, split.meta_train, split.meta_val, phase2.model, train,
                                      train.relation.episodes, rel_rng, record);
  phase2.best_episode_count = outcome.best_episode_count;
  phase2.best_val_accuracy = outcome.best_val_accuracy;
  phase2.history = history;
  if (hooks.checkpoint) hooks.checkpoint("relation", phase2);
  if (!train.retrain) {
    if (hooks.checkpoint) hooks.checkpoint("final", phase2);
    return phase2;
  }

  Rng re_rng = derive_rng(train.seed, 3);
  TrainedModel final_model =
      retrain_full(ds, split, embed_config, rel_config, train, outcome.best_episode_count, re_rng, record);
  final_model.best_val_accuracy = outcome.best_val_accuracy;
  final_model.history = history;
  if (hooks.checkpoint) hooks.checkpoint("final", final_model);
  return final_model;
}

}  // namespace dcn
