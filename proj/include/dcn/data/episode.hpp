#pragma once

#include <algorithm>
#include <random>

#include "dcn/data/split.hpp"

namespace dcn {

struct EpisodeSpec {
  std::size_t ways = 5;     // C
  std::size_t shots = 1;    // K
  std::size_t queries = 5;  // K', per class

  void validate(bool training) const {
    if (training && ways < 2) throw Error("episode: training episodes need at least 2 ways");
    if (ways < 1) throw Error("episode: ways must be >= 1");
    if (shots < 1) throw Error("episode: shots must be >= 1");
    if (queries < 1) throw Error("episode: queries per class must be >= 1");
  }

  std::size_t support_size() const { return ways * shots; }
  std::size_t query_size() const { return ways * queries; }
};

/// One C-way K-shot task. Images are referenced by dataset index; labels are
/// episode-local (0..C-1) and `classes[k]` is the dataset label of local class k.
struct Episode {
  std::vector<std::size_t> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query;
  std::vector<std::size_t> query_labels;

  std::size_t ways() const { return classes.size(); }
};

/// Samples classes from `part` and, per class, K + K' distinct images
/// (all without replacement). Support rows come class by class.
inline Episode sample_episode(const Dataset& ds, const std::vector<std::size_t>& part_classes, const EpisodeSpec& spec,
                              std::mt19937_64& rng, bool training = false) {
  spec.validate(training);
  if (part_classes.size() < spec.ways)
    throw Error("episode: need " + std::to_string(spec.ways) + " classes but the split part has " +
                std::to_string(part_classes.size()));
  for (auto c : part_classes)
    if (ds.by_class.at(c).size() < spec.shots + spec.queries)
      throw Error("episode: class " + ds.class_names.at(c) + " has " + std::to_string(ds.by_class[c].size()) +
                  " images, need " + std::to_string(spec.shots + spec.queries));

  Episode ep;
  std::vector<std::size_t> pool = part_classes;
  std::shuffle(pool.begin(), pool.end(), rng);
  ep.classes.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.ways));

  std::vector<std::vector<std::size_t>> picked(spec.ways);
  for (std::size_t k = 0; k < spec.ways; ++k) {
    std::vector<std::size_t> imgs = ds.by_class[ep.classes[k]];
    std::shuffle(imgs.begin(), imgs.end(), rng);
    imgs.resize(spec.shots + spec.queries);
    picked[k] = std::move(imgs);
  }
  for (std::size_t k = 0; k < spec.ways; ++k)
    for (std::size_t s = 0; s < spec.shots; ++s) {
      ep.support.push_back(picked[k][s]);
      ep.support_labels.push_back(k);
    }
  for (std::size_t k = 0; k < spec.ways; ++k)
    for (std::size_t q = 0; q < spec.queries; ++q) {
      ep.query.push_back(picked[k][spec.shots + q]);
      ep.query_labels.push_back(k);
    }
  return ep;
}

inline Episode sample_episode(const Dataset& ds, const DatasetSplit& split, SplitPart part, const EpisodeSpec& spec,
                              std::mt19937_64& rng) {
  return sample_episode(ds, split.classes(part), spec, rng, part == SplitPart::meta_train);
}

}  // namespace dcn
