#pragma once

#include <random>

#include "dcn/data/augment.hpp"
#include "dcn/data/episode.hpp"
#include "dcn/embedding.hpp"
#include "dcn/relation.hpp"

namespace dcn {

using Real = float;

/// Independent, reproducible stream `stream` of a run seeded with `seed`.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{seed, stream, std::uint64_t{0xdc0}};
  return Rng(seq);
}

/// Embedding column plus relation column.
struct Model {
  EmbeddingColumn<Real> embedding;
  RelationColumn<Real> relation;

  Model(const EmbeddingConfig& ec, const RelationConfig& rc)
      : embedding(ec), relation(rc, ec.channels_per_stage) {}

  ParameterList<Real> parameters() {
    auto out = embedding.parameters();
    auto rel = relation.parameters();
    out.insert(out.end(), rel.begin(), rel.end());
    return out;
  }
};

inline Model make_model(const EmbeddingConfig& ec, const RelationConfig& rc, Rng& rng) {
  Model m(ec, rc);
  m.embedding.init(rng);
  m.relation.init(rng);
  return m;
}

template <typename T>
std::vector<Tensor<T>> snapshot(const ParameterList<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto* p : params) out.push_back(p->value);
  return out;
}

template <typename T>
void restore(const ParameterList<T>& params, const std::vector<Tensor<T>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

/// Stacks dataset images into a (b, c, s, s) batch, optionally augmented.
inline Tensor<Real> make_batch(const Dataset& ds, std::span<const std::size_t> ids, Rng* rng = nullptr,
                               const AugmentConfig* augment = nullptr) {
  const std::size_t s = augment ? augment->out_size : ds.image_size;
  const std::size_t chw = ds.channels * s * s;
  Tensor<Real> batch({ids.size(), ds.channels, s, s});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& img = ds.images.at(ids[i]);
    if (img.pixels.shape() != Shape{ds.channels, ds.image_size, ds.image_size})
      throw Error("make_batch: image " + img.source_id + " has shape " + to_string(img.pixels.shape()));
    if (augment && rng) {
      const Tensor<float> aug = augment_pixels(img.pixels, *rng, *augment);
      std::copy_n(aug.data(), chw, batch.data() + i * chw);
    } else {
      if (s != ds.image_size) throw Error("make_batch: image size differs from batch size");
      std::copy_n(img.pixels.data(), chw, batch.data() + i * chw);
    }
  }
  return batch;
}

/// Per (query, class, level) relation scores of one episode.
struct ScoreTable {
  std::size_t queries = 0, classes = 0, levels = 0;
  std::vector<double> values;

  ScoreTable() = default;
  ScoreTable(std::size_t q, std::size_t c, std::size_t v) : queries(q), classes(c), levels(v), values(q * c * v, 0.0) {}
  double& at(std::size_t q, std::size_t c, std::size_t v) { return values[(q * classes + c) * levels + v]; }
  double at(std::size_t q, std::size_t c, std::size_t v) const { return values[(q * classes + c) * levels + v]; }
  std::span<const double> vector(std::size_t q, std::size_t c) const {
    return std::span<const double>(values).subspan((q * classes + c) * levels, levels);
  }
};

/// Splits an embedded [support; query] batch back into its two hierarchies.
inline std::pair<FeatureHierarchy<Real>, FeatureHierarchy<Real>> split_hierarchy(const FeatureHierarchy<Real>& all,
                                                                                 std::size_t support) {
  FeatureHierarchy<Real> s, q;
  for (const auto& level : all.levels) {
    s.levels.push_back(slice_rows(level, 0, support));
    q.levels.push_back(slice_rows(level, support, level.dim(0)));
  }
  return {std::move(s), std::move(q)};
}

/// Inference: deterministic embedding, running batch-norm statistics.
inline ScoreTable score_episode(Model& model, const Dataset& ds, const Episode& ep) {
  std::vector<std::size_t> ids = ep.support;
  ids.insert(ids.end(), ep.query.begin(), ep.query.end());
  Rng unused(0);
  const auto all = model.embedding.embed(make_batch(ds, ids), NoiseMode::deterministic, unused, false);
  auto [support, query] = split_hierarchy(all, ep.support.size());
  const auto protos = class_prototypes(support, ep.support_labels, ep.ways());
  const auto r = model.relation.forward(query, protos, false);
  ScoreTable table(r.queries, r.classes, r.levels());
  for (std::size_t q = 0; q < r.queries; ++q)
    for (std::size_t c = 0; c < r.classes; ++c)
      for (std::size_t v = 0; v < r.levels(); ++v) table.at(q, c, v) = r.score(q, c, v);
  return table;
}

}  // namespace dcn
