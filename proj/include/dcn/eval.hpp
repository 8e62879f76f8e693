#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>

#include "json.hpp"

#include "dcn/model.hpp"
#include "dcn/train.hpp"

namespace dcn {

/// Produces the relation scores of one episode. Tests inject oracles here.
using EpisodeScorer = std::function<ScoreTable(const Episode&)>;

inline EpisodeScorer model_scorer(Model& model, const Dataset& ds) {
  return [&model, &ds](const Episode& ep) { return score_episode(model, ds, ep); };
}

inline double mean_of(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// 95% half-width: 1.96 * sample std / sqrt(N); zero for fewer than two values.
inline double ci95(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  if (std::adjacent_find(xs.begin(), xs.end(), std::not_equal_to<>()) == xs.end()) return 0.0;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double sample_std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  return 1.96 * sample_std / std::sqrt(static_cast<double>(xs.size()));
}

struct ClassTally {
  std::size_t queries = 0;
  std::size_t combined_correct = 0;
  std::vector<std::size_t> module_correct;
};

struct EvalReport {
  EpisodeSpec spec;
  SplitPart part = SplitPart::meta_test;
  std::size_t num_episodes = 0;
  std::uint64_t seed = 0;
  std::vector<double> weights;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
  std::vector<double> per_module_accuracy;
  std::vector<double> per_module_ci95;
  std::map<std::size_t, ClassTally> per_class;  // keyed by dataset label
  std::vector<double> episode_accuracies;
  std::vector<std::vector<double>> module_episode_accuracies;  // [module][episode]
};

/// Stream of episode `index` of an evaluation seeded with `seed`.
inline Rng episode_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{seed, static_cast<std::uint64_t>(index), std::uint64_t{0xe7a1}};
  return Rng(seq);
}

/// Episodic evaluation. Each episode is scored once; the combined prediction
/// uses the weighted aggregate and module v's prediction uses r_v alone.
inline EvalReport evaluate(const EpisodeScorer& scorer, const Dataset& ds, const DatasetSplit& split, SplitPart part,
                           const EpisodeSpec& spec, std::size_t num_episodes, std::span<const double> weights,
                           std::uint64_t seed) {
  if (num_episodes == 0) throw Error("evaluate: number of episodes must be positive");
  spec.validate(false);
  const auto& classes = split.classes(part);
  if (classes.size() < spec.ways)
    throw Error(std::string("evaluate: ") + to_string(part) + " has " + std::to_string(classes.size()) +
                " classes, " + std::to_string(spec.ways) + "-way episodes need more");

  const std::size_t levels = weights.size();
  EvalReport report;
  report.spec = spec;
  report.part = part;
  report.num_episodes = num_episodes;
  report.seed = seed;
  report.weights.assign(weights.begin(), weights.end());
  report.module_episode_accuracies.assign(levels, {});

  std::vector<double> agg;
  for (std::size_t e = 0; e < num_episodes; ++e) {
    Rng rng = episode_rng(seed, e);
    const Episode ep = sample_episode(ds, classes, spec, rng);
    const ScoreTable table = scorer(ep);
    if (table.queries != ep.query.size() || table.classes != ep.ways() || table.levels != levels)
      throw Error("evaluate: scorer returned a table of the wrong shape");

    std::size_t correct = 0;
    std::vector<std::size_t> module_correct(levels, 0);
    agg.assign(ep.ways(), 0.0);
    for (std::size_t q = 0; q < table.queries; ++q) {
      const std::size_t truth = ep.query_labels[q];
      auto& tally = report.per_class[ep.classes[truth]];
      tally.module_correct.resize(levels, 0);
      ++tally.queries;
      for (std::size_t c = 0; c < ep.ways(); ++c) agg[c] = aggregate_scores(table.vector(q, c), weights);
      if (predict(agg) == truth) {
        ++correct;
        ++tally.combined_correct;
      }
      for (std::size_t v = 0; v < levels; ++v) {
        for (std::size_t c = 0; c < ep.ways(); ++c) agg[c] = table.at(q, c, v);
        if (predict(agg) == truth) {
          ++module_correct[v];
          ++tally.module_correct[v];
        }
      }
    }
    const double n = static_cast<double>(table.queries);
    report.episode_accuracies.push_back(static_cast<double>(correct) / n);
    for (std::size_t v = 0; v < levels; ++v)
      report.module_episode_accuracies[v].push_back(static_cast<double>(module_correct[v]) / n);
  }
  report.mean_accuracy = mean_of(report.episode_accuracies);
  report.ci95 = ci95(report.episode_accuracies);
  for (const auto& accs : report.module_episode_accuracies) {
    report.per_module_accuracy.push_back(mean_of(accs));
    report.per_module_ci95.push_back(ci95(accs));
  }
  return report;
}

/// Evaluates a model trained for `trained_ways` on `spec.ways`-way episodes
/// without touching its parameters; the architecture is way-agnostic.
inline EvalReport cross_way_evaluate(const EpisodeScorer& scorer, std::size_t trained_ways, const Dataset& ds,
                                     const DatasetSplit& split, SplitPart part, const EpisodeSpec& spec,
                                     std::size_t num_episodes, std::span<const double> weights, std::uint64_t seed) {
  if (trained_ways < 1) throw Error("cross_way_evaluate: trained ways must be positive");
  return evaluate(scorer, ds, split, part, spec, num_episodes, weights, seed);
}

/// Accuracy of module `module` (1-based) used on its own.
inline double per_module_accuracy(const EvalReport& report, std::size_t module) {
  if (module < 1 || module > report.per_module_accuracy.size())
    throw Error("per_module_accuracy: module index " + std::to_string(module) + " outside 1.." +
                std::to_string(report.per_module_accuracy.size()));
  return report.per_module_accuracy[module - 1];
}

inline double per_module_accuracy(const EpisodeScorer& scorer, const Dataset& ds, const DatasetSplit& split,
                                  SplitPart part, const EpisodeSpec& spec, std::size_t num_episodes,
                                  std::span<const double> weights, std::uint64_t seed, std::size_t module) {
  if (module < 1 || module > weights.size())
    throw Error("per_module_accuracy: module index " + std::to_string(module) + " outside 1.." +
                std::to_string(weights.size()));
  return per_module_accuracy(evaluate(scorer, ds, split, part, spec, num_episodes, weights, seed), module);
}

/// Ranks starting at 1; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Spearman rank correlation: Pearson correlation of the average-rank vectors.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("spearman: length mismatch");
  if (a.size() < 2) throw Error("spearman: need at least two observations");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw Error("spearman: zero rank variance (constant input)");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct CorrelationMatrix {
  std::size_t modules = 0;
  std::size_t sample_size = 0;
  std::vector<double> values;  // row-major modules x modules

  double at(std::size_t i, std::size_t j) const { return values[i * modules + j]; }
};

/// Spearman correlation between the score lists of every pair of modules over
/// `num_pairs` (query, class prototype) pairs drawn from fresh episodes.
inline CorrelationMatrix module_correlation_matrix(const EpisodeScorer& scorer, const Dataset& ds,
                                                   const DatasetSplit& split, SplitPart part, const EpisodeSpec& spec,
                                                   std::size_t levels, std::size_t num_pairs, std::uint64_t seed) {
  if (num_pairs < 2) throw Error("module_correlation_matrix: need at least two pairs");
  std::vector<std::vector<double>> scores(levels);
  for (std::size_t e = 0; scores.front().size() < num_pairs; ++e) {
    Rng rng = episode_rng(seed ^ 0xc0441ull, e);
    const Episode ep = sample_episode(ds, split.classes(part), spec, rng);
    const ScoreTable t = scorer(ep);
    for (std::size_t q = 0; q < t.queries && scores.front().size() < num_pairs; ++q)
      for (std::size_t c = 0; c < t.classes && scores.front().size() < num_pairs; ++c)
        for (std::size_t v = 0; v < levels; ++v) scores[v].push_back(t.at(q, c, v));
  }
  CorrelationMatrix m{levels, num_pairs, std::vector<double>(levels * levels, 1.0)};
  for (std::size_t i = 0; i < levels; ++i)
    for (std::size_t j = i + 1; j < levels; ++j) {
      const double r = spearman(scores[i], scores[j]);
      m.values[i * levels + j] = r;
      m.values[j * levels + i] = r;
    }
  return m;
}

struct ScatterRow {
  std::size_t label = 0;
  std::string name;
  std::size_t queries = 0;
  double accuracy_a = 0.0;
  double accuracy_b = 0.0;
};

/// Per-class accuracy of module a vs module b (1-based), one row per class of `part`.
inline std::vector<ScatterRow> per_class_scatter(const EvalReport& report, const Dataset& ds,
                                                 const DatasetSplit& split, std::size_t a, std::size_t b) {
  const std::size_t levels = report.per_module_accuracy.size();
  if (a < 1 || a > levels || b < 1 || b > levels)
    throw Error("per_class_scatter: module indices must lie in 1.." + std::to_string(levels));
  std::vector<ScatterRow> rows;
  for (auto label : split.classes(report.part)) {
    ScatterRow row{label, ds.class_names.at(label), 0, std::nan(""), std::nan("")};
    if (auto it = report.per_class.find(label); it != report.per_class.end() && it->second.queries > 0) {
      const double n = static_cast<double>(it->second.queries);
      row.queries = it->second.queries;
      row.accuracy_a = static_cast<double>(it->second.module_correct[a - 1]) / n;
      row.accuracy_b = static_cast<double>(it->second.module_correct[b - 1]) / n;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Shortest round-trip decimal form.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [label, t] : r.per_class) {
    nlohmann::json modules = nlohmann::json::array();
    for (auto c : t.module_correct) modules.push_back(static_cast<double>(c) / static_cast<double>(t.queries));
    per_class[std::to_string(label)] = {
        {"queries", t.queries},
        {"accuracy", static_cast<double>(t.combined_correct) / static_cast<double>(t.queries)},
        {"module_accuracy", modules}};
  }
  return {{"part", to_string(r.part)},
          {"ways", r.spec.ways},
          {"shots", r.spec.shots},
          {"queries", r.spec.queries},
          {"num_episodes", r.num_episodes},
          {"seed", r.seed},
          {"weights", r.weights},
          {"mean_accuracy", r.mean_accuracy},
          {"ci95", r.ci95},
          {"per_module_accuracy", r.per_module_accuracy},
          {"per_module_ci95", r.per_module_ci95},
          {"per_class_accuracy", per_class}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

/// `report.jsonl` (one record) plus `episodes.csv` of per-episode accuracies.
inline void write_eval_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.jsonl", report_json(r).dump() + "\n");
  std::string csv = "episode,accuracy";
  for (std::size_t v = 0; v < r.module_episode_accuracies.size(); ++v) csv += ",rm" + std::to_string(v + 1);
  csv += "\n";
  for (std::size_t e = 0; e < r.episode_accuracies.size(); ++e) {
    csv += std::to_string(e) + "," + format_number(r.episode_accuracies[e]);
    for (const auto& m : r.module_episode_accuracies) csv += "," + format_number(m[e]);
    csv += "\n";
  }
  write_text(dir / "episodes.csv", csv);
}

inline std::string correlation_csv(const CorrelationMatrix& m) {
  std::string csv;
  for (std::size_t j = 0; j < m.modules; ++j) csv += ",RM" + std::to_string(j + 1);
  csv += "\n";
  for (std::size_t i = 0; i < m.modules; ++i) {
    csv += "RM" + std::to_string(i + 1);
    for (std::size_t j = 0; j < m.modules; ++j) csv += "," + format_number(m.at(i, j));
    csv += "\n";
  }
  return csv;
}

inline std::string scatter_csv(const std::vector<ScatterRow>& rows, std::size_t a, std::size_t b) {
  std::string csv = "label,class,queries,rm" + std::to_string(a) + ",rm" + std::to_string(b) + "\n";
  for (const auto& r : rows)
    csv += std::to_string(r.label) + "," + r.name + "," + std::to_string(r.queries) + "," +
           format_number(r.accuracy_a) + "," + format_number(r.accuracy_b) + "\n";
  return csv;
}

/// Minimal SVG scatter of the per-class accuracies (convenience output).
inline std::string scatter_svg(const std::vector<ScatterRow>& rows, std::size_t a, std::size_t b) {
  const double size = 320, pad = 40, span = size - 2 * pad;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"320\" height=\"320\">\n";
  svg += "<rect x=\"40\" y=\"40\" width=\"240\" height=\"240\" fill=\"none\" stroke=\"black\"/>\n";
  svg += "<line x1=\"40\" y1=\"280\" x2=\"280\" y2=\"40\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n";
  svg += "<text x=\"160\" y=\"310\" text-anchor=\"middle\">RM" + std::to_string(a) + " accuracy</text>\n";
  svg += "<text x=\"12\" y=\"160\" transform=\"rotate(-90 12 160)\" text-anchor=\"middle\">RM" + std::to_string(b) +
         " accuracy</text>\n";
  for (const auto& r : rows) {
    if (r.queries == 0) continue;
    svg += "<circle cx=\"" + format_number(pad + r.accuracy_a * span) + "\" cy=\"" +
           format_number(size - pad - r.accuracy_b * span) + "\" r=\"3\"/>\n";
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace dcn
